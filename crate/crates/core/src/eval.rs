//! Trajectory error, output rate and outlier classification metrics.

use std::fmt::Write as _;

use crate::rotation::quat_log;
use crate::types::{RobotId, RobotState};

/// Position (m) and rotation (rad) error of one frame or one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ate {
    pub position: f64,
    pub rotation: f64,
}

/// RMS over the non-reference robots that have an estimate. `truth` is in the
/// world frame; estimates are in the reference robot's body frame.
pub fn ate_frame(truth: &[RobotState], estimates: &[Option<RobotState>], reference: RobotId) -> Option<Ate> {
    let r = reference.index();
    let t0 = truth.get(r)?;
    let r0 = t0.orientation.inverse();
    let (mut sp, mut sr, mut n) = (0.0, 0.0, 0usize);
    for (j, (t, e)) in truth.iter().zip(estimates).enumerate() {
        let Some(e) = e else { continue };
        if j == r {
            continue;
        }
        let p = r0 * (t.position - t0.position);
        sp += (p - e.position).norm_squared();
        let q = r0 * t.orientation;
        sr += quat_log(&(q * e.orientation.inverse())).norm_squared();
        n += 1;
    }
    (n > 0).then(|| Ate { position: (sp / n as f64).sqrt(), rotation: (sr / n as f64).sqrt() })
}

/// RMS over frames.
pub fn ate_sequence(frames: &[Ate]) -> Option<Ate> {
    if frames.is_empty() {
        return None;
    }
    let m = frames.len() as f64;
    Some(Ate {
        position: (frames.iter().map(|a| a.position * a.position).sum::<f64>() / m).sqrt(),
        rotation: (frames.iter().map(|a| a.rotation * a.rotation).sum::<f64>() / m).sqrt(),
    })
}

pub fn output_rate(valid: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| valid as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing was kept, so precision is reported as 0.
    pub empty_precision: bool,
    pub true_positive: usize,
    pub kept: usize,
    pub inliers: usize,
}

/// Positive class: true inlier kept. `keep` and `outlier` are parallel.
pub fn pr_of_rejection<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> Classification {
    let (mut tp, mut kept, mut inliers) = (0usize, 0usize, 0usize);
    for (keep, outlier) in pairs {
        for (&k, &o) in keep.iter().zip(outlier) {
            kept += usize::from(k);
            inliers += usize::from(!o);
            tp += usize::from(k && !o);
        }
    }
    let empty_precision = kept == 0;
    let precision = if empty_precision { 0.0 } else { tp as f64 / kept as f64 };
    let recall = if inliers == 0 { 0.0 } else { tp as f64 / inliers as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Classification { precision, recall, f1, empty_precision, true_positive: tp, kept, inliers }
}

pub const CSV_HEADER: &str = "# relpose-csv v1\ntrial,axis,point,tier,metric,value\n";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub trial: String,
    pub axis: String,
    pub point: String,
    pub tier: String,
    pub metric: String,
    pub value: f64,
}

impl CsvRow {
    pub fn new(trial: impl ToString, axis: &str, point: impl ToString, tier: &str, metric: &str, value: f64) -> Self {
        CsvRow {
            trial: trial.to_string(),
            axis: axis.into(),
            point: point.to_string(),
            tier: tier.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.trial, r.axis, r.point, r.tier, r.metric, r.value);
    }
    out
}
