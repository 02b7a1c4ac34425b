//! Synthetic trajectories and sensor streams.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rotation::{canonical, quat_exp, quat_log, Quat};
use crate::types::{
    BearingMeasurement, DistanceMeasurement, Extrinsics, GravityMeasurement, ImuSample, MeasurementFrame, NoiseConfig,
    RobotId, RobotState, Timestamp,
};

pub const GRAVITY: f64 = 9.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub n_robots: usize,
    pub duration: f64,
    /// Edge lengths of the box centred on the origin.
    pub volume: Vector3<f64>,
    pub control_point_rate: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn new(n_robots: usize, duration: f64, seed: u64) -> Self {
        TrajectorySpec { n_robots, duration, volume: Vector3::repeat(10.0), control_point_rate: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_robots < 2 {
            return Err(Error::InvalidInput("need at least two robots".into()));
        }
        if !(self.duration > 0.0) || !(self.control_point_rate > 0.0) || self.volume.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("duration, rate and volume must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DegradationSpec {
    pub bearing_missing_rate: f64,
    /// Expected outliers per observer and bearing frame, as a fraction of `n - 1`.
    pub bearing_outlier_rate: f64,
    pub anonymous: bool,
    pub distance_dropout_rate: f64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.bearing_missing_rate) || !unit(self.distance_dropout_rate) || !(self.bearing_outlier_rate >= 0.0) {
            return Err(Error::InvalidInput("degradation rates out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRates {
    pub bearing: f64,
    pub distance: f64,
    pub gravity: f64,
    pub imu: f64,
}

impl Default for SensorRates {
    fn default() -> Self {
        SensorRates { bearing: 50.0, distance: 100.0, gravity: 100.0, imu: 100.0 }
    }
}

/// Cubic uniform cumulative B-spline on positions and rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    positions: Vec<Vector3<f64>>,
    rotations: Vec<Quat>,
    /// Log of consecutive relative rotations.
    deltas: Vec<Vector3<f64>>,
    knot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub orientation: Quat,
    /// Body frame.
    pub angular_velocity: Vector3<f64>,
}

impl Trajectory {
    pub fn new(positions: Vec<Vector3<f64>>, rotations: Vec<Quat>, knot: f64) -> Result<Self> {
        if positions.len() < 4 || positions.len() != rotations.len() || !(knot > 0.0) {
            return Err(Error::InvalidInput("spline needs at least four matching control points".into()));
        }
        let deltas = rotations.windows(2).map(|w| quat_log(&(w[0].inverse() * w[1]))).collect();
        Ok(Trajectory { positions, rotations, deltas, knot })
    }

    pub fn duration(&self) -> f64 {
        (self.positions.len() - 3) as f64 * self.knot
    }

    pub fn eval(&self, t: f64) -> TrajectoryPoint {
        let s = (t / self.knot).clamp(0.0, (self.positions.len() - 3) as f64);
        let i = (s.floor() as usize).min(self.positions.len() - 4);
        let u = s - i as f64;
        let (u2, u3) = (u * u, u * u * u);
        let b = [(5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0, (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0, u3 / 6.0];
        let db = [(3.0 - 6.0 * u + 3.0 * u2) / 6.0, (3.0 + 6.0 * u - 6.0 * u2) / 6.0, 3.0 * u2 / 6.0];
        let ddb = [(-6.0 + 6.0 * u) / 6.0, (6.0 - 12.0 * u) / 6.0, u];
        let mut p = self.positions[i];
        let mut v = Vector3::zeros();
        let mut a = Vector3::zeros();
        let mut q = self.rotations[i];
        let mut w = Vector3::zeros();
        for k in 0..3 {
            let dp = self.positions[i + k + 1] - self.positions[i + k];
            p += b[k] * dp;
            v += db[k] * dp;
            a += ddb[k] * dp;
            let d = self.deltas[i + k];
            let step = quat_exp(&(b[k] * d));
            q *= step;
            w = step.inverse() * w + db[k] * d;
        }
        TrajectoryPoint {
            position: p,
            velocity: v / self.knot,
            acceleration: a / (self.knot * self.knot),
            orientation: canonical(q),
            angular_velocity: w / self.knot,
        }
    }

    pub fn state(&self, t: f64) -> RobotState {
        let p = self.eval(t);
        RobotState::new(p.position, p.velocity, p.orientation)
    }
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> Quat {
    // Shoemake
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin());
    canonical(Quat::from_quaternion(q))
}

fn random_spline(rng: &mut ChaCha8Rng, spec: &TrajectorySpec) -> Trajectory {
    let knot = 1.0 / spec.control_point_rate;
    let m = (spec.duration / knot).ceil() as usize + 4;
    let positions = (0..m)
        .map(|_| Vector3::from_fn(|k, _| (rng.gen::<f64>() - 0.5) * spec.volume[k]))
        .collect();
    let rotations = (0..m).map(|_| uniform_rotation(rng)).collect();
    Trajectory::new(positions, rotations, knot).expect("at least four control points")
}

pub fn generate_trajectories(spec: &TrajectorySpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    Ok((0..spec.n_robots).map(|_| random_spline(&mut rng, spec)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GravityMode {
    Absent,
    Constant,
    Varying,
}

impl std::str::FromStr for GravityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(GravityMode::Absent),
            "constant" => Ok(GravityMode::Constant),
            "varying" => Ok(GravityMode::Varying),
            _ => Err(Error::InvalidInput(format!("unknown gravity mode '{s}'"))),
        }
    }
}

/// World gravity shared by all robots at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityField {
    pub mode: GravityMode,
    sampler: Option<Trajectory>,
}

impl GravityField {
    /// In the varying mode the field points from the origin to a point moving
    /// on its own random spline, scaled by `9.8 * d / 5`.
    pub fn at(&self, t: f64) -> Vector3<f64> {
        match self.mode {
            GravityMode::Absent => Vector3::zeros(),
            GravityMode::Constant => Vector3::new(0.0, 0.0, -GRAVITY),
            GravityMode::Varying => varying_gravity(&self.sampler.as_ref().unwrap().eval(t).position),
        }
    }
}

/// Field for a sampling point `s`: direction `s / |s|`, magnitude `9.8 |s| / 5`.
pub fn varying_gravity(s: &Vector3<f64>) -> Vector3<f64> {
    s * (GRAVITY / 5.0)
}

pub fn variable_gravity_field(mode: GravityMode, duration: f64, seed: u64) -> GravityField {
    let sampler = (mode == GravityMode::Varying).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        random_spline(&mut rng, &TrajectorySpec::new(2, duration.max(1e-3), seed))
    });
    GravityField { mode, sampler }
}

/// Rotates `dir` about a uniformly random perpendicular axis by an angle
/// drawn from `N(0, sigma^2)`.
pub fn perturb_direction(dir: &Vector3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    if sigma <= 0.0 {
        return *dir;
    }
    let seed = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = dir.cross(&seed).normalize();
    let e2 = dir.cross(&e1);
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let axis = e1 * phi.cos() + e2 * phi.sin();
    let angle: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
    (quat_exp(&(axis * angle)) * dir).normalize()
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma <= 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sigma)
}

pub const MIN_RANGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub rates: SensorRates,
    pub degradation: DegradationSpec,
    /// Generation noise; zeros give exact data.
    pub noise: NoiseConfig,
    pub gravity: GravityMode,
    /// Random-walk biases at the configured drift rates.
    pub bias_walk: bool,
}

impl SimConfig {
    pub fn benchmark() -> Self {
        SimConfig {
            rates: SensorRates::default(),
            degradation: DegradationSpec::default(),
            noise: NoiseConfig::benchmark(),
            gravity: GravityMode::Constant,
            bias_walk: false,
        }
    }

    pub fn noiseless() -> Self {
        let noise = NoiseConfig {
            sigma_b: 0.0,
            sigma_d: 0.0,
            sigma_g: 0.0,
            accel_noise: 0.0,
            gyro_noise: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
            gravity_enabled: true,
        };
        SimConfig { noise, ..SimConfig::benchmark() }
    }
}

/// Independent random streams so that changing one degradation knob does not
/// reshuffle the others.
struct Streams {
    noise: ChaCha8Rng,
    imu: ChaCha8Rng,
    missing: ChaCha8Rng,
    outliers: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(10 + k);
            r
        };
        Streams { noise: s(0), imu: s(1), missing: s(2), outliers: s(3), dropout: s(4) }
    }
}

fn every(base: f64, rate: f64) -> usize {
    if rate <= 0.0 {
        return usize::MAX;
    }
    ((base / rate).round() as usize).max(1)
}

/// Camera-frame unit vector from `obs` to the target's marker.
pub fn true_bearing(obs: &RobotState, tgt: &RobotState, e_obs: &Extrinsics, e_tgt: &Extrinsics) -> Option<Vector3<f64>> {
    let r_i = obs.orientation.to_rotation_matrix().into_inner();
    let r_j = tgt.orientation.to_rotation_matrix().into_inner();
    let d = tgt.position + r_j * e_tgt.marker_position - obs.position - r_i * e_obs.cam_position;
    let len = d.norm();
    (len > 1e-9).then(|| e_obs.cam_rotation.matrix().transpose() * r_i.transpose() * d / len)
}

pub fn true_distance(a: &RobotState, b: &RobotState, ea: &Extrinsics, eb: &Extrinsics) -> f64 {
    let ra: Matrix3<f64> = a.orientation.to_rotation_matrix().into_inner();
    let rb: Matrix3<f64> = b.orientation.to_rotation_matrix().into_inner();
    (b.position + rb * eb.uwb_position - a.position - ra * ea.uwb_position).norm()
}

/// Samples every sensor along the trajectories. Frames run at the distance
/// rate; bearings and gravity attach to every k-th frame.
pub fn synthesize(
    trajectories: &[Trajectory],
    extrinsics: &[Extrinsics],
    config: &SimConfig,
    field: &GravityField,
    duration: f64,
    seed: u64,
) -> Result<Dataset> {
    let n = trajectories.len();
    if n < 2 || extrinsics.len() != n {
        return Err(Error::InvalidInput("trajectories and extrinsics must cover at least two robots".into()));
    }
    config.degradation.validate()?;
    let rates = &config.rates;
    if !(rates.distance > 0.0) || !(rates.imu > 0.0) {
        return Err(Error::InvalidInput("frame and IMU rates must be positive".into()));
    }
    let noise = &config.noise;
    let deg = &config.degradation;
    let mut rng = Streams::new(seed);
    let id = |j: usize| RobotId(j as u32);

    // IMU
    let imu_dt = 1.0 / rates.imu;
    let n_imu = (duration / imu_dt + 1e-9).floor() as usize + 1;
    let mut accel_bias = vec![Vector3::zeros(); n];
    let mut gyro_bias = vec![Vector3::zeros(); n];
    let mut imu = Vec::with_capacity(n_imu * n);
    for k in 0..n_imu {
        let t = k as f64 * imu_dt;
        let g = field.at(t);
        for j in 0..n {
            let pt = trajectories[j].eval(t);
            let rt = pt.orientation.to_rotation_matrix().into_inner().transpose();
            let f = rt * (pt.acceleration - g) + accel_bias[j] + gauss3(&mut rng.imu, noise.accel_noise);
            let w = pt.angular_velocity + gyro_bias[j] + gauss3(&mut rng.imu, noise.gyro_noise);
            imu.push(ImuSample { robot: id(j), timestamp: Timestamp::from_secs(t), specific_force: f, angular_velocity: w });
            if config.bias_walk {
                accel_bias[j] += gauss3(&mut rng.imu, noise.accel_bias_walk * imu_dt.sqrt());
                gyro_bias[j] += gauss3(&mut rng.imu, noise.gyro_bias_walk * imu_dt.sqrt());
            }
        }
    }

    let frame_dt = 1.0 / rates.distance;
    let n_frames = (duration / frame_dt + 1e-9).floor() as usize + 1;
    let bearing_every = every(rates.distance, rates.bearing);
    let gravity_every = every(rates.distance, rates.gravity);
    let mut frames = Vec::with_capacity(n_frames);
    let mut outliers = Vec::with_capacity(n_frames);
    let mut truth = Vec::with_capacity(n_frames);
    let mut detection = 0u32;
    for k in 0..n_frames {
        let ts = k as f64 * frame_dt;
        let t = Timestamp::from_secs(ts);
        let states: Vec<RobotState> = trajectories.iter().map(|tr| tr.state(ts)).collect();
        let mut frame = MeasurementFrame::new(t);
        let mut labels = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let d = true_distance(&states[i], &states[j], &extrinsics[i], &extrinsics[j])
                    + if noise.sigma_d > 0.0 { rng.noise.sample::<f64, _>(StandardNormal) * noise.sigma_d } else { 0.0 };
                // ranging reports a small positive floor on near-contact
                let d = d.max(MIN_RANGE);
                let drop = deg.distance_dropout_rate > 0.0 && rng.dropout.gen::<f64>() < deg.distance_dropout_rate;
                if !drop {
                    frame.distances.push(DistanceMeasurement::new(id(i), id(j), d, t)?);
                }
            }
        }
        if k % bearing_every == 0 {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let Some(dir) = true_bearing(&states[i], &states[j], &extrinsics[i], &extrinsics[j]) else { continue };
                    let z = perturb_direction(&dir, noise.sigma_b, &mut rng.noise);
                    if deg.bearing_missing_rate > 0.0 && rng.missing.gen::<f64>() < deg.bearing_missing_rate {
                        continue;
                    }
                    detection += 1;
                    if deg.anonymous {
                        for c in (0..n).filter(|&c| c != i) {
                            frame.bearings.push(BearingMeasurement::new(id(i), id(c), z, t, detection)?);
                            labels.push(c != j);
                        }
                    } else {
                        frame.bearings.push(BearingMeasurement::new(id(i), id(j), z, t, detection)?);
                        labels.push(false);
                    }
                }
                let expected = deg.bearing_outlier_rate * (n - 1) as f64;
                let count = expected.floor() as usize + usize::from(rng.outliers.gen::<f64>() < expected.fract());
                for _ in 0..count {
                    let v: [f64; 3] = UnitSphere.sample(&mut rng.outliers);
                    let mut c = rng.outliers.gen_range(0..n - 1);
                    if c >= i {
                        c += 1;
                    }
                    detection += 1;
                    frame.bearings.push(BearingMeasurement::new(id(i), id(c), Vector3::from(v).normalize(), t, detection)?);
                    labels.push(true);
                }
            }
        }
        if k % gravity_every == 0 {
            let g = field.at(ts);
            if g.norm() > 1e-9 {
                let up = -g.normalize();
                for (j, s) in states.iter().enumerate() {
                    let body = s.orientation.inverse() * up;
                    let z = perturb_direction(&body, noise.sigma_g, &mut rng.noise);
                    frame.gravities.push(GravityMeasurement::new(id(j), z, t)?);
                }
            }
        }
        frames.push(frame);
        outliers.push(labels);
        truth.push(states);
    }
    Ok(Dataset { n_robots: n, seed, noise: *noise, extrinsics: extrinsics.to_vec(), frames, outliers, imu, truth })
}

/// Trajectories, field and sensors from one seed.
pub fn simulate(spec: &TrajectorySpec, config: &SimConfig) -> Result<Dataset> {
    let trajectories = generate_trajectories(spec)?;
    let field = variable_gravity_field(config.gravity, spec.duration, spec.seed);
    let ext = vec![Extrinsics::default(); spec.n_robots];
    synthesize(&trajectories, &ext, config, &field, spec.duration, spec.seed)
}

/// State of `j` in the body frame of `reference`; velocity is frame-relative.
pub fn relative_state(reference: &RobotState, j: &RobotState) -> RobotState {
    let ri = reference.orientation.inverse();
    RobotState::new(ri * (j.position - reference.position), ri * (j.velocity - reference.velocity), canonical(ri * j.orientation))
}
