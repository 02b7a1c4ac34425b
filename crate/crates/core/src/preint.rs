//! IMU preintegration and robocentric relative kinematics.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::rotation::{quat_exp, skew, Quat};
use crate::types::{ImuSample, NoiseConfig, RobotState, Timestamp};

pub type Cov9 = SMatrix<f64, 9, 9>;

/// Tolerance on matching integration intervals, seconds.
pub const INTERVAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Biases {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl Biases {
    pub fn of(state: &RobotState) -> Self {
        Biases { accel: state.accel_bias, gyro: state.gyro_bias }
    }
}

/// Position, velocity and rotation deltas over an interval, expressed in the
/// body frame at its start, with covariance over `(d_alpha, d_beta, d_theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preintegration {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: Quat,
    pub covariance: Cov9,
    pub dt_total: f64,
    pub accel_bias_ref: Vector3<f64>,
    pub gyro_bias_ref: Vector3<f64>,
}

impl Preintegration {
    /// Empty interval.
    pub fn identity(biases: &Biases) -> Self {
        Preintegration {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: Quat::identity(),
            covariance: Cov9::zeros(),
            dt_total: 0.0,
            accel_bias_ref: biases.accel,
            gyro_bias_ref: biases.gyro,
        }
    }

    /// One midpoint step between raw samples `(a0, w0)` and `(a1, w1)`.
    pub fn step(
        &mut self,
        a0: &Vector3<f64>,
        w0: &Vector3<f64>,
        a1: &Vector3<f64>,
        w1: &Vector3<f64>,
        dt: f64,
        noise: &NoiseConfig,
    ) {
        let r0 = self.gamma.to_rotation_matrix().into_inner();
        let w = 0.5 * (w0 + w1) - self.gyro_bias_ref;
        let dq = quat_exp(&(w * dt));
        let gamma1 = self.gamma * dq;
        let r1 = gamma1.to_rotation_matrix().into_inner();
        let f0 = a0 - self.accel_bias_ref;
        let f1 = a1 - self.accel_bias_ref;
        let acc = 0.5 * (r0 * f0 + r1 * f1);

        // error-state transition
        let fm = 0.5 * (f0 + f1);
        let mut f = Cov9::identity();
        let dr = dq.to_rotation_matrix().into_inner();
        let ra = -r0 * skew(&fm);
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(0.5 * dt * dt * ra));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(dt * ra));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&dr.transpose());
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.5 * dt * dt * r0));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dt * r0));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for k in 0..3 {
            q[(k, k)] = noise.accel_noise.powi(2);
            q[(k + 3, k + 3)] = noise.gyro_noise.powi(2);
        }
        let p = f * self.covariance * f.transpose() + g * q * g.transpose();
        self.covariance = 0.5 * (p + p.transpose());

        self.alpha += self.beta * dt + 0.5 * acc * dt * dt;
        self.beta += acc * dt;
        self.gamma = crate::rotation::canonical(gamma1);
        self.dt_total += dt;
    }

    /// `self` over `[t0, ta]` followed by `later` over `[ta, tb]`.
    pub fn compose(&self, later: &Preintegration) -> Preintegration {
        let ra = self.gamma.to_rotation_matrix().into_inner();
        let rb = later.gamma.to_rotation_matrix().into_inner();
        let mut a = Cov9::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * later.dt_total));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-ra * skew(&later.alpha)));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-ra * skew(&later.beta)));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&rb.transpose());
        let mut b = Cov9::identity();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);
        let cov = a * self.covariance * a.transpose() + b * later.covariance * b.transpose();
        Preintegration {
            alpha: self.alpha + self.beta * later.dt_total + ra * later.alpha,
            beta: self.beta + ra * later.beta,
            gamma: crate::rotation::canonical(self.gamma * later.gamma),
            covariance: 0.5 * (cov + cov.transpose()),
            dt_total: self.dt_total + later.dt_total,
            accel_bias_ref: self.accel_bias_ref,
            gyro_bias_ref: self.gyro_bias_ref,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.gamma.to_rotation_matrix().into_inner()
    }
}

fn check_monotone(samples: &[ImuSample]) -> Result<()> {
    if samples.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::NonMonotoneTimestamps);
    }
    Ok(())
}

/// Integrates an ordered sample stream over its full span.
pub fn integrate(samples: &[ImuSample], biases: &Biases, noise: &NoiseConfig) -> Result<Preintegration> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("preintegration needs at least two samples".into()));
    }
    check_monotone(samples)?;
    let mut pre = Preintegration::identity(biases);
    for w in samples.windows(2) {
        let dt = w[1].timestamp.since(w[0].timestamp);
        pre.step(&w[0].specific_force, &w[0].angular_velocity, &w[1].specific_force, &w[1].angular_velocity, dt, noise);
    }
    Ok(pre)
}

/// Sample linearly interpolated at `t`, which must lie inside the stream.
pub fn interpolate(samples: &[ImuSample], t: Timestamp) -> Option<ImuSample> {
    let k = samples.partition_point(|s| s.timestamp < t);
    if k < samples.len() && samples[k].timestamp == t {
        return Some(samples[k]);
    }
    if k == 0 || k == samples.len() {
        return None;
    }
    let (a, b) = (&samples[k - 1], &samples[k]);
    let u = t.since(a.timestamp) / b.timestamp.since(a.timestamp);
    Some(ImuSample {
        robot: a.robot,
        timestamp: t,
        specific_force: a.specific_force * (1.0 - u) + b.specific_force * u,
        angular_velocity: a.angular_velocity * (1.0 - u) + b.angular_velocity * u,
    })
}

/// Integrates `[t0, t1]` out of a longer stream, interpolating at the ends.
pub fn integrate_between(
    samples: &[ImuSample],
    t0: Timestamp,
    t1: Timestamp,
    biases: &Biases,
    noise: &NoiseConfig,
) -> Result<Preintegration> {
    if t1 < t0 {
        return Err(Error::NonMonotoneTimestamps);
    }
    if t1 == t0 {
        return Ok(Preintegration::identity(biases));
    }
    let first = interpolate(samples, t0).ok_or_else(|| Error::InvalidInput(format!("no IMU data at {}", t0.secs())))?;
    let last = interpolate(samples, t1).ok_or_else(|| Error::InvalidInput(format!("no IMU data at {}", t1.secs())))?;
    let mut seq = vec![first];
    seq.extend(samples.iter().filter(|s| s.timestamp > t0 && s.timestamp < t1).copied());
    seq.push(last);
    integrate(&seq, biases, noise)
}

/// Moves robot `j`'s state, expressed in reference robot `i`'s body frame at
/// `t0`, to `t1` using both robots' preintegrations over the same interval.
/// Velocities are frame-relative without the term induced by the rotation of
/// the reference frame.
pub fn propagate_relative(state: &RobotState, pre_i: &Preintegration, pre_j: &Preintegration) -> Result<RobotState> {
    if (pre_i.dt_total - pre_j.dt_total).abs() > INTERVAL_TOLERANCE {
        return Err(Error::IntervalMismatch(pre_i.dt_total, pre_j.dt_total));
    }
    let dt = pre_i.dt_total;
    let ri_t = pre_i.rotation().transpose();
    let r0 = state.orientation.to_rotation_matrix().into_inner();
    let p = ri_t * (state.position + state.velocity * dt + r0 * pre_j.alpha - pre_i.alpha);
    let v = ri_t * (state.velocity + r0 * pre_j.beta - pre_i.beta);
    let q = pre_i.gamma.inverse() * state.orientation * pre_j.gamma;
    Ok(RobotState { position: p, velocity: v, orientation: crate::rotation::canonical(q), ..*state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{quat_log, rot_exp};
    use crate::types::RobotId;
    use proptest::prelude::*;

    const HZ: f64 = 100.0;

    fn stream(duration: f64, f: impl Fn(f64) -> (Vector3<f64>, Vector3<f64>)) -> Vec<ImuSample> {
        let n = (duration * HZ).round() as i64;
        (0..=n)
            .map(|k| {
                let t = k as f64 / HZ;
                let (a, w) = f(t);
                ImuSample { robot: RobotId(0), timestamp: Timestamp(k * 10_000_000), specific_force: a, angular_velocity: w }
            })
            .collect()
    }

    fn noise() -> NoiseConfig {
        NoiseConfig::benchmark()
    }

    /// Analytic rigid motion: world position, velocity, acceleration, rotation
    /// and body angular rate as functions of time.
    #[derive(Debug, Clone, Copy)]
    struct Motion {
        c: [f64; 6],
        w: Vector3<f64>,
        r0: Vector3<f64>,
    }

    impl Motion {
        fn pos(&self, t: f64) -> Vector3<f64> {
            let c = self.c;
            Vector3::new(c[0] * (c[3] * t).sin(), c[1] * (c[4] * t).cos(), c[2] * t * t + c[5] * t)
        }
        fn vel(&self, t: f64) -> Vector3<f64> {
            let c = self.c;
            Vector3::new(c[0] * c[3] * (c[3] * t).cos(), -c[1] * c[4] * (c[4] * t).sin(), 2.0 * c[2] * t + c[5])
        }
        fn acc(&self, t: f64) -> Vector3<f64> {
            let c = self.c;
            Vector3::new(-c[0] * c[3] * c[3] * (c[3] * t).sin(), -c[1] * c[4] * c[4] * (c[4] * t).cos(), 2.0 * c[2])
        }
        fn rot(&self, t: f64) -> Matrix3<f64> {
            rot_exp(&self.r0) * rot_exp(&(self.w * t))
        }
        /// IMU stream with world gravity `g` (acceleration of free fall).
        fn imu(&self, duration: f64, g: Vector3<f64>) -> Vec<ImuSample> {
            stream(duration, |t| (self.rot(t).transpose() * (self.acc(t) - g), self.w))
        }
        fn state_rel(&self, other: &Motion, t: f64) -> RobotState {
            let ri = self.rot(t);
            RobotState::new(
                ri.transpose() * (other.pos(t) - self.pos(t)),
                ri.transpose() * (other.vel(t) - self.vel(t)),
                crate::rotation::quat_from_matrix(&(ri.transpose() * other.rot(t))),
            )
        }
    }

    fn motion(seed: [f64; 12]) -> Motion {
        Motion {
            c: [seed[0], seed[1], seed[2], seed[3], seed[4], seed[5]],
            w: Vector3::new(seed[6], seed[7], seed[8]),
            r0: Vector3::new(seed[9], seed[10], seed[11]),
        }
    }

    #[test]
    fn zero_input_is_identity() {
        let s = stream(1.0, |_| (Vector3::zeros(), Vector3::zeros()));
        let p = integrate(&s, &Biases::default(), &noise()).unwrap();
        assert_eq!(p.alpha, Vector3::zeros());
        assert_eq!(p.beta, Vector3::zeros());
        assert_eq!(p.gamma, Quat::identity());
        assert!((p.dt_total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_acceleration() {
        let s = stream(1.0, |_| (Vector3::x(), Vector3::zeros()));
        let p = integrate(&s, &Biases::default(), &noise()).unwrap();
        assert!((p.alpha - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-6);
        assert!((p.beta - Vector3::x()).norm() < 1e-6);
    }

    #[test]
    fn constant_rate_rotation() {
        let w = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let s = stream(1.0, |_| (Vector3::zeros(), w));
        let p = integrate(&s, &Biases::default(), &noise()).unwrap();
        assert!(quat_log(&(p.gamma.inverse() * quat_exp(&w))).norm() < 1e-8);
        let w = Vector3::new(0.3, -1.1, 0.7);
        let s = stream(3.0, |_| (Vector3::zeros(), w));
        let p = integrate(&s, &Biases::default(), &noise()).unwrap();
        assert!(quat_log(&(p.gamma.inverse() * quat_exp(&(w * 3.0)))).norm() < 3e-8);
    }

    #[test]
    fn rejects_bad_streams() {
        let mut s = stream(0.1, |_| (Vector3::zeros(), Vector3::zeros()));
        s.swap(2, 3);
        assert_eq!(integrate(&s, &Biases::default(), &noise()), Err(Error::NonMonotoneTimestamps));
        assert!(integrate(&s[..1], &Biases::default(), &noise()).is_err());
        let a = integrate(&stream(1.0, |_| (Vector3::zeros(), Vector3::zeros())), &Biases::default(), &noise()).unwrap();
        let b = integrate(&stream(1.1, |_| (Vector3::zeros(), Vector3::zeros())), &Biases::default(), &noise()).unwrap();
        assert!(matches!(propagate_relative(&RobotState::identity(), &a, &b), Err(Error::IntervalMismatch(_, _))));
    }

    #[test]
    fn static_pair_with_gravity_reaction() {
        let s = stream(1.0, |_| (Vector3::new(0.0, 0.0, 9.81), Vector3::zeros()));
        let p = integrate(&s, &Biases::default(), &noise()).unwrap();
        let x = RobotState::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Quat::identity());
        let y = propagate_relative(&x, &p, &p).unwrap();
        assert!((y.position - x.position).norm() < 1e-9);
        assert!(y.velocity.norm() < 1e-9);
        assert!(quat_log(&(y.orientation.inverse() * x.orientation)).norm() < 1e-9);
    }

    #[test]
    fn analytic_pair_matches_truth() {
        let a = motion([1.0, 2.0, 0.3, 0.8, 1.3, 0.5, 0.2, -0.4, 0.9, 0.1, 0.2, 0.3]);
        let b = motion([2.0, 0.5, -0.2, 1.1, 0.7, -0.3, -0.6, 0.3, 0.2, 1.0, -0.5, 0.4]);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let pa = integrate(&a.imu(1.0, g), &Biases::default(), &noise()).unwrap();
        let pb = integrate(&b.imu(1.0, g), &Biases::default(), &noise()).unwrap();
        let y = propagate_relative(&a.state_rel(&b, 0.0), &pa, &pb).unwrap();
        let truth = a.state_rel(&b, 1.0);
        assert!((y.position - truth.position).norm() < 1e-4);
        assert!(quat_log(&(y.orientation.inverse() * truth.orientation)).norm() < 1e-4);
        // velocity is relative to the start frame, rotated into the end frame
        let v = a.rot(1.0).transpose() * (b.vel(1.0) - a.vel(1.0));
        assert!((y.velocity - v).norm() < 1e-4);
    }

    #[test]
    fn interpolated_window_matches_direct() {
        let m = motion([1.0, 2.0, 0.3, 0.8, 1.3, 0.5, 0.2, -0.4, 0.9, 0.1, 0.2, 0.3]);
        let s = m.imu(2.0, Vector3::zeros());
        let direct = integrate(&s[30..=150], &Biases::default(), &noise()).unwrap();
        let cut = integrate_between(&s, Timestamp(300_000_000), Timestamp(1_500_000_000), &Biases::default(), &noise()).unwrap();
        assert!((direct.alpha - cut.alpha).norm() < 1e-12);
        let half = integrate_between(&s, Timestamp(305_000_000), Timestamp(1_500_000_000), &Biases::default(), &noise()).unwrap();
        assert!((half.dt_total - 1.195).abs() < 1e-12);
        assert!(integrate_between(&s, Timestamp(0), Timestamp(3_000_000_000), &Biases::default(), &noise()).is_err());
    }

    #[test]
    fn compose_matches_direct() {
        let m = motion([1.0, 2.0, 0.3, 0.8, 1.3, 0.5, 0.2, -0.4, 0.9, 0.1, 0.2, 0.3]);
        let s = m.imu(2.0, Vector3::new(0.0, 0.0, -9.81));
        let full = integrate(&s, &Biases::default(), &noise()).unwrap();
        let a = integrate(&s[..=80], &Biases::default(), &noise()).unwrap();
        let b = integrate(&s[80..], &Biases::default(), &noise()).unwrap();
        let c = a.compose(&b);
        assert!((full.alpha - c.alpha).norm() < 1e-10);
        assert!((full.beta - c.beta).norm() < 1e-10);
        assert!(quat_log(&(full.gamma.inverse() * c.gamma)).norm() < 1e-12);
        let rel = (full.covariance - c.covariance).abs().max() / full.covariance.abs().max();
        // the per-step transition is first order in dt, composition is exact
        assert!(rel < 1e-2, "{rel}");
    }

    fn arb_motion() -> impl Strategy<Value = Motion> {
        (
            prop::array::uniform6(-2.0f64..2.0),
            prop::array::uniform3(-1.0f64..1.0),
            prop::array::uniform3(-1.5f64..1.5),
        )
            .prop_map(|(c, w, r)| Motion { c, w: Vector3::from(w), r0: Vector3::from(r) })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gravity_cancels(a in arb_motion(), b in arb_motion(), gz in prop::array::uniform3(-10.0f64..10.0)) {
            let g = Vector3::from(gz);
            let x = a.state_rel(&b, 0.0);
            let run = |g: Vector3<f64>| {
                let pa = integrate(&a.imu(1.0, g), &Biases::default(), &noise()).unwrap();
                let pb = integrate(&b.imu(1.0, g), &Biases::default(), &noise()).unwrap();
                propagate_relative(&x, &pa, &pb).unwrap()
            };
            let (y0, y1) = (run(Vector3::zeros()), run(g));
            prop_assert!((y0.position - y1.position).norm() < 1e-6);
            prop_assert!((y0.velocity - y1.velocity).norm() < 1e-6);
            prop_assert!(quat_log(&(y0.orientation.inverse() * y1.orientation)).norm() < 1e-6);
        }

        #[test]
        fn chained_propagation_matches_direct(a in arb_motion(), b in arb_motion()) {
            let (sa, sb) = (a.imu(2.0, Vector3::new(0.0, 0.0, -9.81)), b.imu(2.0, Vector3::new(0.0, 0.0, -9.81)));
            let x = a.state_rel(&b, 0.0);
            let int = |s: &[ImuSample]| integrate(s, &Biases::default(), &noise()).unwrap();
            let direct = propagate_relative(&x, &int(&sa), &int(&sb)).unwrap();
            let mid = propagate_relative(&x, &int(&sa[..=100]), &int(&sb[..=100])).unwrap();
            let chained = propagate_relative(&mid, &int(&sa[100..]), &int(&sb[100..])).unwrap();
            prop_assert!((direct.position - chained.position).norm() < 1e-5);
            prop_assert!((direct.velocity - chained.velocity).norm() < 1e-5);
            prop_assert!(quat_log(&(direct.orientation.inverse() * chained.orientation)).norm() < 1e-5);
        }

        #[test]
        fn covariance_stays_psd(a in arb_motion()) {
            let s = a.imu(1.0, Vector3::new(0.0, 0.0, -9.81));
            let mut p = Preintegration::identity(&Biases::default());
            for w in s.windows(2) {
                p.step(&w[0].specific_force, &w[0].angular_velocity, &w[1].specific_force, &w[1].angular_velocity, 0.01, &noise());
                prop_assert!(p.covariance.symmetric_eigenvalues().min() >= -1e-12);
            }
        }
    }
}
