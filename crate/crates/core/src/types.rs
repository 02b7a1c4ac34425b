//! Identifiers, time, states and measurement records.

use std::cell::Cell;
use std::fmt;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rotation::{canonical, Quat, RotationMatrix};

/// Robots are numbered `0..n` within a run; the id doubles as an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RobotId(pub u32);

impl RobotId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Integer nanoseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_secs(s: f64) -> Self {
        Timestamp((s * 1e9).round() as i64)
    }

    pub fn secs(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    /// `self - earlier` in seconds.
    pub fn since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 * 1e-9
    }
}

/// Per-robot state expressed in the reference robot's body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: Quat,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl RobotState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, orientation: Quat) -> Self {
        RobotState {
            position,
            velocity,
            orientation: canonical(orientation),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), Quat::identity())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.orientation.coords.iter().all(|x| x.is_finite())
            && self.accel_bias.iter().all(|x| x.is_finite())
            && self.gyro_bias.iter().all(|x| x.is_finite())
    }
}

/// Sensor placement in the robot body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub cam_rotation: RotationMatrix,
    pub cam_position: Vector3<f64>,
    pub uwb_position: Vector3<f64>,
    pub marker_position: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Extrinsics {
            cam_rotation: RotationMatrix::identity(),
            cam_position: Vector3::zeros(),
            uwb_position: Vector3::zeros(),
            marker_position: Vector3::zeros(),
        }
    }
}

impl Extrinsics {
    pub fn has_lever_arms(&self) -> bool {
        self.cam_position.norm() > 0.0
            || self.uwb_position.norm() > 0.0
            || self.marker_position.norm() > 0.0
    }
}

fn unit_direction(d: Vector3<f64>) -> Result<Vector3<f64>> {
    let n = d.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("direction norm {n} is not unit")));
    }
    Ok(d / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMeasurement {
    pub from: RobotId,
    pub to: RobotId,
    pub range: f64,
    pub timestamp: Timestamp,
}

impl DistanceMeasurement {
    pub fn new(from: RobotId, to: RobotId, range: f64, timestamp: Timestamp) -> Result<Self> {
        if from == to {
            return Err(Error::InvalidInput("distance to self".into()));
        }
        if !(range > 0.0) || !range.is_finite() {
            return Err(Error::InvalidInput(format!("range {range} must be positive")));
        }
        Ok(DistanceMeasurement { from, to, range, timestamp })
    }
}

/// Unit direction from the observer's camera to the target's marker, in the
/// camera frame. `detection` groups copies of one physical detection (used
/// when ids are unknown and every candidate id is tried).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingMeasurement {
    pub observer: RobotId,
    pub target: RobotId,
    pub direction: Vector3<f64>,
    pub timestamp: Timestamp,
    pub detection: u32,
}

impl BearingMeasurement {
    pub fn new(
        observer: RobotId,
        target: RobotId,
        direction: Vector3<f64>,
        timestamp: Timestamp,
        detection: u32,
    ) -> Result<Self> {
        if observer == target {
            return Err(Error::InvalidInput("bearing to self".into()));
        }
        Ok(BearingMeasurement {
            observer,
            target,
            direction: unit_direction(direction)?,
            timestamp,
            detection,
        })
    }
}

/// Unit gravity direction in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityMeasurement {
    pub robot: RobotId,
    pub direction: Vector3<f64>,
    pub timestamp: Timestamp,
}

impl GravityMeasurement {
    pub fn new(robot: RobotId, direction: Vector3<f64>, timestamp: Timestamp) -> Result<Self> {
        Ok(GravityMeasurement { robot, direction: unit_direction(direction)?, timestamp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub robot: RobotId,
    pub timestamp: Timestamp,
    /// Includes the gravity reaction.
    pub specific_force: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

/// All measurements sharing one bearing timestamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementFrame {
    pub timestamp: Timestamp,
    pub distances: Vec<DistanceMeasurement>,
    pub bearings: Vec<BearingMeasurement>,
    pub gravities: Vec<GravityMeasurement>,
}

impl MeasurementFrame {
    pub fn new(timestamp: Timestamp) -> Self {
        MeasurementFrame { timestamp, ..Default::default() }
    }

    /// Gravity measurement of `robot`. Every estimator read goes through here
    /// and is counted, see [`gravity_reads`].
    pub fn gravity_of(&self, robot: RobotId) -> Option<&GravityMeasurement> {
        GRAVITY_READS.with(|c| c.set(c.get() + 1));
        self.gravities.iter().find(|g| g.robot == robot)
    }

    /// Indices of the bearings taken by `observer`.
    pub fn bearings_of(&self, observer: RobotId) -> Vec<usize> {
        (0..self.bearings.len()).filter(|&k| self.bearings[k].observer == observer).collect()
    }
}

thread_local! {
    static GRAVITY_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of gravity lookups made on this thread since the last reset.
pub fn gravity_reads() -> u64 {
    GRAVITY_READS.with(|c| c.get())
}

pub fn reset_gravity_reads() {
    GRAVITY_READS.with(|c| c.set(0));
}

/// Sensor noise levels. The same record parameterizes the simulator and the
/// estimator weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_b: f64,
    pub sigma_d: f64,
    pub sigma_g: f64,
    pub accel_noise: f64,
    pub gyro_noise: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub gravity_enabled: bool,
}

impl NoiseConfig {
    /// Levels of the simulated desk-scale benchmark.
    pub fn benchmark() -> Self {
        NoiseConfig {
            sigma_b: 2f64.to_radians(),
            sigma_d: 0.1,
            sigma_g: 2f64.to_radians(),
            accel_noise: 0.1,
            gyro_noise: 0.01,
            accel_bias_walk: 0.001,
            gyro_bias_walk: 0.0001,
            gravity_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_b,
            self.sigma_d,
            self.sigma_g,
            self.accel_noise,
            self.gyro_noise,
            self.accel_bias_walk,
            self.gyro_bias_walk,
        ];
        if all.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("noise levels must be positive".into()))
        }
    }

    /// Copy usable as estimator weights: non-positive levels (noiseless data)
    /// fall back to the benchmark values.
    pub fn estimator_weights(&self) -> Self {
        let b = Self::benchmark();
        let pick = |x: f64, d: f64| if x > 0.0 && x.is_finite() { x } else { d };
        NoiseConfig {
            sigma_b: pick(self.sigma_b, b.sigma_b),
            sigma_d: pick(self.sigma_d, b.sigma_d),
            sigma_g: pick(self.sigma_g, b.sigma_g),
            accel_noise: pick(self.accel_noise, b.accel_noise),
            gyro_noise: pick(self.gyro_noise, b.gyro_noise),
            accel_bias_walk: pick(self.accel_bias_walk, b.accel_bias_walk),
            gyro_bias_walk: pick(self.gyro_bias_walk, b.gyro_bias_walk),
            gravity_enabled: self.gravity_enabled,
        }
    }

    pub fn with_gravity(mut self, on: bool) -> Self {
        self.gravity_enabled = on;
        self
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}
