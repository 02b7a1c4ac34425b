//! Single-frame nonlinear refinement of the closed-form poses.

use crate::outlier_pcm::InlierMask;
use crate::residuals::{BearingFactor, DistanceFactor, GravityFactor};
use crate::rotation::Quat;
use crate::sfc::SfcResult;
use crate::solver::{Loss, ParameterBlock, Problem, ResidualBlock, SolveReport, SolverOptions};
use crate::types::{Extrinsics, MeasurementFrame, NoiseConfig, RobotId};

const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SfoOutput {
    pub result: SfcResult,
    /// False when the solver failed and the closed-form result is returned.
    pub refined: bool,
    pub report: Option<SolveReport>,
}

/// Builds the single-frame problem. Returns the problem with blocks laid out
/// as `p_0, q_0, p_1, q_1, ...` and the gravity block index if present.
pub fn build_sfo_problem(
    frame: &MeasurementFrame,
    sfc: &SfcResult,
    mask: &InlierMask,
    ext: &[Extrinsics],
    noise: &NoiseConfig,
) -> (Problem, Option<usize>) {
    let n = sfc.len();
    let r = sfc.reference.index();
    let mut problem = Problem::new();
    for i in 0..n {
        let observable = sfc.rotation_observable[i];
        let q = sfc.orientations[i].unwrap_or_else(Quat::identity);
        problem.add_block(ParameterBlock::euclidean(sfc.positions[i].as_slice()).frozen(i == r));
        problem.add_block(ParameterBlock::quaternion(&q).frozen(i == r || !observable));
    }
    let (p, q) = (|i: usize| 2 * i, |i: usize| 2 * i + 1);
    for d in &frame.distances {
        let (i, j) = (d.from.index(), d.to.index());
        if i >= n || j >= n {
            continue;
        }
        problem.add_residual(
            ResidualBlock::new(DistanceFactor::new(d, ext), vec![p(i), q(i), p(j), q(j)])
                .with_sigma(noise.sigma_d)
                .with_loss(Loss::Huber(HUBER_DELTA)),
        );
    }
    for (k, b) in frame.bearings.iter().enumerate() {
        let (i, j) = (b.observer.index(), b.target.index());
        if !mask.keep[k] || i >= n || j >= n || !sfc.rotation_observable[i] {
            continue;
        }
        problem.add_residual(
            ResidualBlock::new(BearingFactor::new(b, ext), vec![p(i), q(i), p(j), q(j)])
                .with_sigma(noise.sigma_b)
                .with_loss(Loss::Huber(HUBER_DELTA)),
        );
    }
    let mut g_block = None;
    if noise.gravity_enabled {
        let init = sfc.gravity_rf.or_else(|| frame.gravity_of(RobotId(r as u32)).map(|g| g.direction));
        if let Some(g0) = init {
            let gb = problem.add_block(ParameterBlock::unit_sphere(&g0));
            g_block = Some(gb);
            for i in (0..n).filter(|&i| sfc.rotation_observable[i]) {
                if let Some(m) = frame.gravity_of(RobotId(i as u32)) {
                    problem.add_residual(
                        ResidualBlock::new(GravityFactor { direction: m.direction }, vec![q(i), gb]).with_sigma(noise.sigma_g),
                    );
                }
            }
        }
    }
    (problem, g_block)
}

/// Refines `sfc` with distances, inlier bearings and gravity. Observability
/// flags are kept from the closed-form stage.
pub fn run_sfo(
    frame: &MeasurementFrame,
    sfc: &SfcResult,
    mask: &InlierMask,
    ext: &[Extrinsics],
    noise: &NoiseConfig,
) -> SfoOutput {
    let (mut problem, g_block) = build_sfo_problem(frame, sfc, mask, ext, noise);
    let report = match problem.solve(&SolverOptions::default()) {
        Ok(r) => r,
        Err(_) => return SfoOutput { result: sfc.clone(), refined: false, report: None },
    };
    let mut out = sfc.clone();
    for i in 0..sfc.len() {
        out.positions[i] = problem.block(2 * i).vec3();
        if sfc.rotation_observable[i] {
            out.orientations[i] = Some(problem.block(2 * i + 1).quat());
        }
    }
    if let Some(gb) = g_block {
        out.gravity_rf = Some(problem.block(gb).vec3());
    }
    SfoOutput { result: out, refined: true, report: Some(report) }
}
