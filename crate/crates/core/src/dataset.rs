//! Line-oriented dataset files.
//!
//! ```text
//! # comment
//! HEADER <n_robots> <seed> <sigma_b> <sigma_d> <sigma_g> <accel_noise> <gyro_noise> <accel_bias_walk> <gyro_bias_walk> <gravity 0|1>
//! EXTR   <robot> <cam_qw> <cam_qx> <cam_qy> <cam_qz> <cam_px> <cam_py> <cam_pz> <uwb_x> <uwb_y> <uwb_z> <marker_x> <marker_y> <marker_z>
//! DIST   <from> <to> <t_ns> <range>
//! BEAR   <observer> <target> <t_ns> <detection> <outlier 0|1> <dx> <dy> <dz>
//! GRAV   <robot> <t_ns> <gx> <gy> <gz>
//! IMU    <robot> <t_ns> <ax> <ay> <az> <wx> <wy> <wz>
//! TRUTH  <robot> <t_ns> <px> <py> <pz> <vx> <vy> <vz> <qw> <qx> <qy> <qz>
//! ```
//!
//! Reals are written with 9 significant digits. Frames are the distinct
//! timestamps of TRUTH and measurement records, in increasing order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::rotation::{Quat, RotationMatrix};
use crate::types::{
    BearingMeasurement, DistanceMeasurement, Extrinsics, GravityMeasurement, ImuSample, MeasurementFrame, NoiseConfig,
    RobotId, RobotState, Timestamp,
};

/// A synthetic or recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_robots: usize,
    pub seed: u64,
    /// Noise the data was generated with; may contain zeros.
    pub noise: NoiseConfig,
    pub extrinsics: Vec<Extrinsics>,
    pub frames: Vec<MeasurementFrame>,
    /// `outliers[f][k]` labels `frames[f].bearings[k]`.
    pub outliers: Vec<Vec<bool>>,
    /// All robots, sorted by timestamp then robot.
    pub imu: Vec<ImuSample>,
    /// `truth[f][j]`, world frame; empty when unknown.
    pub truth: Vec<Vec<RobotState>>,
}

impl Dataset {
    pub fn imu_of(&self, robot: RobotId) -> Vec<ImuSample> {
        self.imu.iter().filter(|s| s.robot == robot).copied().collect()
    }

    pub fn has_truth(&self) -> bool {
        !self.truth.is_empty() && self.truth.len() == self.frames.len()
    }
}

fn f(x: f64) -> String {
    format!("{x:.8e}")
}

fn v3(v: &Vector3<f64>) -> String {
    format!("{} {} {}", f(v.x), f(v.y), f(v.z))
}

fn q4(q: &Quat) -> String {
    format!("{} {} {} {}", f(q.w), f(q.i), f(q.j), f(q.k))
}

pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let n = &ds.noise;
    out.push_str("# relpose-dataset v1\n");
    let _ = writeln!(
        out,
        "HEADER {} {} {} {} {} {} {} {} {} {}",
        ds.n_robots,
        ds.seed,
        f(n.sigma_b),
        f(n.sigma_d),
        f(n.sigma_g),
        f(n.accel_noise),
        f(n.gyro_noise),
        f(n.accel_bias_walk),
        f(n.gyro_bias_walk),
        u8::from(n.gravity_enabled)
    );
    for (j, e) in ds.extrinsics.iter().enumerate() {
        let _ = writeln!(
            out,
            "EXTR {j} {} {} {} {}",
            q4(&e.cam_rotation.to_quat()),
            v3(&e.cam_position),
            v3(&e.uwb_position),
            v3(&e.marker_position)
        );
    }
    let mut imu = ds.imu.iter().peekable();
    for (fi, frame) in ds.frames.iter().enumerate() {
        let t = frame.timestamp;
        while let Some(s) = imu.next_if(|s| s.timestamp <= t) {
            write_imu(&mut out, s);
        }
        if let Some(states) = ds.truth.get(fi) {
            for (j, s) in states.iter().enumerate() {
                let _ = writeln!(out, "TRUTH {j} {} {} {} {}", t.0, v3(&s.position), v3(&s.velocity), q4(&s.orientation));
            }
        }
        for d in &frame.distances {
            let _ = writeln!(out, "DIST {} {} {} {}", d.from.0, d.to.0, t.0, f(d.range));
        }
        for (k, b) in frame.bearings.iter().enumerate() {
            let label = ds.outliers.get(fi).and_then(|l| l.get(k)).copied().unwrap_or(false);
            let _ = writeln!(
                out,
                "BEAR {} {} {} {} {} {}",
                b.observer.0,
                b.target.0,
                t.0,
                b.detection,
                u8::from(label),
                v3(&b.direction)
            );
        }
        for g in &frame.gravities {
            let _ = writeln!(out, "GRAV {} {} {}", g.robot.0, t.0, v3(&g.direction));
        }
    }
    for s in imu {
        write_imu(&mut out, s);
    }
    out
}

fn write_imu(out: &mut String, s: &ImuSample) {
    let _ = writeln!(out, "IMU {} {} {} {}", s.robot.0, s.timestamp.0, v3(&s.specific_force), v3(&s.angular_velocity));
}

struct Fields<'a> {
    it: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Dataset { line: self.line, message: message.into() }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.it.next().ok_or_else(|| Error::Dataset { line: self.line, message: "missing field".into() })
    }

    fn real(&mut self) -> Result<f64> {
        let s = self.next()?;
        let x: f64 = s.parse().map_err(|_| self.err(format!("bad number '{s}'")))?;
        if !x.is_finite() {
            return Err(self.err(format!("non-finite number '{s}'")));
        }
        Ok(x)
    }

    fn int<T: std::str::FromStr>(&mut self) -> Result<T> {
        let s = self.next()?;
        s.parse().map_err(|_| self.err(format!("bad integer '{s}'")))
    }

    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.real()?, self.real()?, self.real()?))
    }

    fn quat(&mut self) -> Result<Quat> {
        let (w, x, y, z) = (self.real()?, self.real()?, self.real()?, self.real()?);
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(self.err("quaternion is not unit"));
        }
        Ok(Quat::from_quaternion(q))
    }

    fn robot(&mut self, n: usize) -> Result<RobotId> {
        let id: u32 = self.int()?;
        if id as usize >= n {
            return Err(self.err(format!("robot id {id} out of range")));
        }
        Ok(RobotId(id))
    }

    fn done(&mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(s) => Err(self.err(format!("unexpected trailing field '{s}'"))),
        }
    }
}

#[derive(Default)]
struct FrameAcc {
    frame: Option<MeasurementFrame>,
    outliers: Vec<bool>,
    truth: BTreeMap<usize, RobotState>,
}

pub fn read_dataset(text: &str) -> Result<Dataset> {
    let mut header: Option<(usize, u64, NoiseConfig)> = None;
    let mut extrinsics: Vec<Option<Extrinsics>> = Vec::new();
    let mut frames: BTreeMap<i64, FrameAcc> = BTreeMap::new();
    let mut imu = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fl = Fields { it: trimmed.split_whitespace(), line };
        let tag = fl.next()?;
        if tag == "HEADER" {
            if header.is_some() {
                return Err(fl.err("duplicate HEADER"));
            }
            let n: usize = fl.int()?;
            if n < 2 {
                return Err(fl.err("need at least two robots"));
            }
            let seed: u64 = fl.int()?;
            let noise = NoiseConfig {
                sigma_b: fl.real()?,
                sigma_d: fl.real()?,
                sigma_g: fl.real()?,
                accel_noise: fl.real()?,
                gyro_noise: fl.real()?,
                accel_bias_walk: fl.real()?,
                gyro_bias_walk: fl.real()?,
                gravity_enabled: match fl.next()? {
                    "0" => false,
                    "1" => true,
                    s => return Err(fl.err(format!("bad flag '{s}'"))),
                },
            };
            fl.done()?;
            header = Some((n, seed, noise));
            extrinsics = vec![None; n];
            continue;
        }
        let Some((n, _, _)) = header else {
            return Err(fl.err("record before HEADER"));
        };
        match tag {
            "EXTR" => {
                let j = fl.robot(n)?;
                let cam_q = fl.quat()?;
                let e = Extrinsics {
                    cam_rotation: RotationMatrix::from_quat(&cam_q),
                    cam_position: fl.vec3()?,
                    uwb_position: fl.vec3()?,
                    marker_position: fl.vec3()?,
                };
                fl.done()?;
                extrinsics[j.index()] = Some(e);
            }
            "DIST" => {
                let (a, b) = (fl.robot(n)?, fl.robot(n)?);
                let t = Timestamp(fl.int()?);
                let range = fl.real()?;
                fl.done()?;
                let m = DistanceMeasurement::new(a, b, range, t).map_err(|e| fl.err(e.to_string()))?;
                frame_at(&mut frames, t).distances.push(m);
            }
            "BEAR" => {
                let (a, b) = (fl.robot(n)?, fl.robot(n)?);
                let t = Timestamp(fl.int()?);
                let det: u32 = fl.int()?;
                let label = match fl.next()? {
                    "0" => false,
                    "1" => true,
                    s => return Err(fl.err(format!("bad label '{s}'"))),
                };
                let dir = fl.vec3()?;
                fl.done()?;
                let m = BearingMeasurement::new(a, b, dir, t, det).map_err(|e| fl.err(e.to_string()))?;
                frame_at(&mut frames, t).bearings.push(m);
                frames.get_mut(&t.0).unwrap().outliers.push(label);
            }
            "GRAV" => {
                let a = fl.robot(n)?;
                let t = Timestamp(fl.int()?);
                let dir = fl.vec3()?;
                fl.done()?;
                let m = GravityMeasurement::new(a, dir, t).map_err(|e| fl.err(e.to_string()))?;
                frame_at(&mut frames, t).gravities.push(m);
            }
            "IMU" => {
                let a = fl.robot(n)?;
                let t = Timestamp(fl.int()?);
                let s = ImuSample { robot: a, timestamp: t, specific_force: fl.vec3()?, angular_velocity: fl.vec3()? };
                fl.done()?;
                imu.push(s);
            }
            "TRUTH" => {
                let a = fl.robot(n)?;
                let t = Timestamp(fl.int()?);
                let (p, v, q) = (fl.vec3()?, fl.vec3()?, fl.quat()?);
                fl.done()?;
                frame_at(&mut frames, t);
                frames.get_mut(&t.0).unwrap().truth.insert(a.index(), RobotState::new(p, v, q));
            }
            other => return Err(fl.err(format!("unknown record '{other}'"))),
        }
    }
    let (n, seed, noise) = header.ok_or(Error::Dataset { line: 0, message: "missing HEADER".into() })?;
    imu.sort_by_key(|s: &ImuSample| (s.timestamp, s.robot));
    for w in imu.windows(2) {
        if w[0].timestamp == w[1].timestamp && w[0].robot == w[1].robot {
            return Err(Error::Dataset { line: 0, message: format!("duplicate IMU sample at {}", w[0].timestamp.0) });
        }
    }
    let all_truth = frames.values().all(|a| a.truth.len() == n);
    let mut out = Dataset {
        n_robots: n,
        seed,
        noise,
        extrinsics: extrinsics.into_iter().map(Option::unwrap_or_default).collect(),
        frames: Vec::with_capacity(frames.len()),
        outliers: Vec::with_capacity(frames.len()),
        imu,
        truth: Vec::new(),
    };
    for (t, acc) in frames {
        out.frames.push(acc.frame.unwrap_or_else(|| MeasurementFrame::new(Timestamp(t))));
        out.outliers.push(acc.outliers);
        if all_truth {
            out.truth.push(acc.truth.into_values().collect());
        }
    }
    Ok(out)
}

fn frame_at(frames: &mut BTreeMap<i64, FrameAcc>, t: Timestamp) -> &mut MeasurementFrame {
    frames.entry(t.0).or_default().frame.get_or_insert_with(|| MeasurementFrame::new(t))
}
