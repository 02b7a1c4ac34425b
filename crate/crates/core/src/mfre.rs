//! Multi-frame relative estimation.
//!
//! MFLO fuses single-frame outputs loosely: only the first-frame states of the
//! window are optimized and every later frame is reached through relative
//! kinematics. MFTO optimizes all keyframe states tightly against distances,
//! bearings, gravity and relative inertial factors, with an auxiliary state per
//! keyframe interval carrying the reference robot's own motion. Old keyframes
//! leave the window through Schur-complement marginalization.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::outlier_pcm::InlierMask;
use crate::preint::{integrate_between, propagate_relative, Biases, Cov9, Preintegration};
use crate::residuals::{BearingFactor, DistanceFactor, GravityFactor};
use crate::rotation::{canonical, left_jacobian_inv, quat_log, right_jacobian_inv, skew, Quat};
use crate::sfc::SfcResult;
use crate::solver::{quat_of, vec3_of, Factor, Loss, ParameterBlock, Problem, ResidualBlock, SolveReport, SolverOptions};
use crate::types::{Extrinsics, ImuSample, MeasurementFrame, NoiseConfig, RobotId, RobotState, Timestamp};

pub const T_MIN: f64 = 0.1;
pub const T_MAX: f64 = 0.2;
/// Minimum time between the first and latest fused single-frame pose before a
/// robot's multi-frame estimate is reported.
pub const VALID_SPAN: f64 = 0.5;
pub const DEFAULT_WINDOW: usize = 10;
/// MFLO position and rotation weights, read as variances.
pub const SIGMA_P: f64 = 0.316_227_766_016_837_94;
pub const SIGMA_Q: f64 = 0.1;
pub const MFTO_MAX_ITERATIONS: usize = 10;
const HUBER_DELTA: f64 = 1.0;

/// `(dt > t_min and single-frame output) or dt > t_max`.
pub fn is_keyframe(now: Timestamp, last_kf: Option<Timestamp>, sfre_produced: bool) -> bool {
    match last_kf {
        None => true,
        Some(t) => {
            let dt = now.since(t);
            (dt > T_MIN && sfre_produced) || dt > T_MAX
        }
    }
}

fn rot(q: &Quat) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

fn put(j: &mut DMatrix<f64>, row: usize, m: &Matrix3<f64>) {
    j.fixed_view_mut::<3, 3>(row, 0).copy_from(m);
}

// ---------------------------------------------------------------------------
// MFLO factors

/// Position of robot `j` at a later frame against its first-frame state:
/// `R(gamma_i) p_hat - (p0 + v0 dt - alpha_i + R0 alpha_j)`.
#[derive(Debug, Clone)]
pub struct MfloPositionFactor {
    pub p_hat: Vector3<f64>,
    pub rot_i: Matrix3<f64>,
    pub alpha_i: Vector3<f64>,
    pub alpha_j: Vector3<f64>,
    pub dt: f64,
}

impl Factor for MfloPositionFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let (p0, v0, r0) = (vec3_of(p[0]), vec3_of(p[1]), rot(&quat_of(p[2])));
        let r = self.rot_i * self.p_hat - (p0 + v0 * self.dt - self.alpha_i + r0 * self.alpha_j);
        if let Some(out) = jac {
            put(&mut out[0], 0, &-Matrix3::identity());
            put(&mut out[1], 0, &(-Matrix3::identity() * self.dt));
            put(&mut out[2], 0, &(r0 * skew(&self.alpha_j)));
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// `Log(gamma_j^T q0^T gamma_i q_hat)`.
#[derive(Debug, Clone)]
pub struct MfloRotationFactor {
    pub q_hat: Quat,
    pub gamma_i: Quat,
    pub gamma_j: Quat,
}

impl Factor for MfloRotationFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let q0 = quat_of(p[0]);
        let r = quat_log(&(self.gamma_j.inverse() * q0.inverse() * self.gamma_i * self.q_hat));
        if let Some(out) = jac {
            put(&mut out[0], 0, &(-left_jacobian_inv(&r) * rot(&self.gamma_j).transpose()));
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// Gravity seen by a robot whose orientation is `q0 gamma` relative to the
/// frame in which `g` is expressed: `R(gamma)^T R0^T g - z`.
#[derive(Debug, Clone)]
pub struct PropagatedGravityFactor {
    pub direction: Vector3<f64>,
    pub gamma: Matrix3<f64>,
}

impl Factor for PropagatedGravityFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let r0 = rot(&quat_of(p[0]));
        let g = vec3_of(p[1]);
        let body0 = r0.transpose() * g;
        if let Some(out) = jac {
            put(&mut out[0], 0, &(self.gamma.transpose() * skew(&body0)));
            put(&mut out[1], 0, &(self.gamma.transpose() * r0.transpose()));
        }
        DVector::from_column_slice((self.gamma.transpose() * body0 - self.direction).as_slice())
    }
}

// ---------------------------------------------------------------------------
// MFTO factors

/// Square-root information of a preintegration residual whose rotation part
/// is the left error `Log(pred gamma_hat^T)`.
pub fn inertial_sqrt_information(pre: &Preintegration) -> DMatrix<f64> {
    let mut t = Cov9::identity();
    t.fixed_view_mut::<3, 3>(6, 6).copy_from(&pre.rotation());
    let cov = t * pre.covariance * t.transpose() + Cov9::identity() * 1e-14;
    let info = cov.try_inverse().unwrap_or_else(Cov9::identity);
    let info = 0.5 * (info + info.transpose());
    match info.cholesky() {
        Some(c) => DMatrix::from_column_slice(9, 9, c.l().transpose().as_slice()),
        None => DMatrix::identity(9, 9),
    }
}

/// Relative inertial factor of a target robot over one interval:
/// blocks `[p_a, v_a, q_a, p_b, v_b, q_b, p_aux, v_aux, q_aux]`.
#[derive(Debug, Clone)]
pub struct TargetInertialFactor {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: Quat,
    pub dt: f64,
}

impl TargetInertialFactor {
    pub fn new(pre: &Preintegration) -> Self {
        TargetInertialFactor { alpha: pre.alpha, beta: pre.beta, gamma: pre.gamma, dt: pre.dt_total }
    }
}

impl Factor for TargetInertialFactor {
    fn dim(&self) -> usize {
        9
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let (pa, va, qa) = (vec3_of(p[0]), vec3_of(p[1]), quat_of(p[2]));
        let (pb, vb, qb) = (vec3_of(p[3]), vec3_of(p[4]), quat_of(p[5]));
        let (px, vx, qx) = (vec3_of(p[6]), vec3_of(p[7]), quat_of(p[8]));
        let (ra, rb, rx) = (rot(&qa), rot(&qb), rot(&qx));
        let e = rx * pb - pa - va * self.dt + px;
        let f = rx * vb - va + vx;
        let ralpha = ra.transpose() * e - self.alpha;
        let rbeta = ra.transpose() * f - self.beta;
        let rgamma = quat_log(&(qa.inverse() * qx * qb * self.gamma.inverse()));
        if let Some(out) = jac {
            for o in out.iter_mut() {
                o.fill(0.0);
            }
            let rat = ra.transpose();
            let jr = right_jacobian_inv(&rgamma);
            let rg = rot(&self.gamma);
            out[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&-rat);
            out[1].fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rat * self.dt));
            out[1].fixed_view_mut::<3, 3>(3, 0).copy_from(&-rat);
            out[2].fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&(rat * e)));
            out[2].fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(rat * f)));
            out[2].fixed_view_mut::<3, 3>(6, 0).copy_from(&-left_jacobian_inv(&rgamma));
            out[3].fixed_view_mut::<3, 3>(0, 0).copy_from(&(rat * rx));
            out[4].fixed_view_mut::<3, 3>(3, 0).copy_from(&(rat * rx));
            out[5].fixed_view_mut::<3, 3>(6, 0).copy_from(&(jr * rg));
            out[6].fixed_view_mut::<3, 3>(0, 0).copy_from(&rat);
            out[7].fixed_view_mut::<3, 3>(3, 0).copy_from(&rat);
            out[8].fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rat * rx * skew(&pb)));
            out[8].fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rat * rx * skew(&vb)));
            out[8].fixed_view_mut::<3, 3>(6, 0).copy_from(&(jr * rg * rb.transpose()));
        }
        let mut r = DVector::zeros(9);
        r.fixed_rows_mut::<3>(0).copy_from(&ralpha);
        r.fixed_rows_mut::<3>(3).copy_from(&rbeta);
        r.fixed_rows_mut::<3>(6).copy_from(&rgamma);
        r
    }
}

/// Reference robot's own preintegration against the auxiliary state:
/// blocks `[p_aux, v_aux, q_aux]`.
#[derive(Debug, Clone)]
pub struct ReferenceInertialFactor {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: Quat,
}

impl ReferenceInertialFactor {
    pub fn new(pre: &Preintegration) -> Self {
        ReferenceInertialFactor { alpha: pre.alpha, beta: pre.beta, gamma: pre.gamma }
    }
}

impl Factor for ReferenceInertialFactor {
    fn dim(&self) -> usize {
        9
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let rgamma = quat_log(&(quat_of(p[2]) * self.gamma.inverse()));
        if let Some(out) = jac {
            for o in out.iter_mut() {
                o.fill(0.0);
            }
            out[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            out[1].fixed_view_mut::<3, 3>(3, 0).copy_from(&Matrix3::identity());
            out[2].fixed_view_mut::<3, 3>(6, 0).copy_from(&(right_jacobian_inv(&rgamma) * rot(&self.gamma)));
        }
        let mut r = DVector::zeros(9);
        r.fixed_rows_mut::<3>(0).copy_from(&(vec3_of(p[0]) - self.alpha));
        r.fixed_rows_mut::<3>(3).copy_from(&(vec3_of(p[1]) - self.beta));
        r.fixed_rows_mut::<3>(6).copy_from(&rgamma);
        r
    }
}

/// Linear prior `r_m + J_m (x boxminus x_lin)` over `[p, v, q]` triples.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub prior: MarginalizationPrior,
}

impl Factor for PriorFactor {
    fn dim(&self) -> usize {
        self.prior.residual.len()
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let m = self.prior.robots.len();
        let mut delta = DVector::zeros(9 * m);
        let mut jr = Vec::with_capacity(m);
        for (k, lin) in self.prior.linearization.iter().enumerate() {
            let dq = quat_log(&(lin.orientation.inverse() * quat_of(p[3 * k + 2])));
            delta.fixed_rows_mut::<3>(9 * k).copy_from(&(vec3_of(p[3 * k]) - lin.position));
            delta.fixed_rows_mut::<3>(9 * k + 3).copy_from(&(vec3_of(p[3 * k + 1]) - lin.velocity));
            delta.fixed_rows_mut::<3>(9 * k + 6).copy_from(&dq);
            jr.push(right_jacobian_inv(&dq));
        }
        if let Some(out) = jac {
            let j = &self.prior.jacobian;
            for k in 0..m {
                out[3 * k].copy_from(&j.columns(9 * k, 3));
                out[3 * k + 1].copy_from(&j.columns(9 * k + 3, 3));
                out[3 * k + 2].copy_from(&(j.columns(9 * k + 6, 3) * jr[k]));
            }
        }
        &self.prior.residual + &self.prior.jacobian * delta
    }
}

// ---------------------------------------------------------------------------
// Sliding window

/// Reference robot's motion over one keyframe interval, expressed at its start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxiliaryState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: Quat,
}

impl AuxiliaryState {
    pub fn from_preint(pre: &Preintegration) -> Self {
        AuxiliaryState { position: pre.alpha, velocity: pre.beta, orientation: pre.gamma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalizationPrior {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Robots whose first-keyframe states the prior constrains, in column order.
    pub robots: Vec<usize>,
    pub linearization: Vec<RobotState>,
}

/// Keyframe contents used by MFTO.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub timestamp: Timestamp,
    pub frame: MeasurementFrame,
    pub mask: InlierMask,
    /// Per robot, in the reference robot's frame at this time. Entries of
    /// robots outside the active set are placeholders.
    pub states: Vec<RobotState>,
    pub gravity: Option<Vector3<f64>>,
}

/// Inertial data between consecutive keyframes.
#[derive(Debug, Clone)]
pub struct KeyframeInterval {
    pub preints: Vec<Preintegration>,
    pub aux: AuxiliaryState,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub keyframes: VecDeque<Keyframe>,
    /// `intervals[k]` joins keyframe `k` and `k + 1`.
    pub intervals: VecDeque<KeyframeInterval>,
    pub prior: Option<MarginalizationPrior>,
    pub capacity: usize,
    pub active: Vec<bool>,
}

impl SlidingWindow {
    pub fn new(capacity: usize, n: usize) -> Self {
        SlidingWindow { keyframes: VecDeque::new(), intervals: VecDeque::new(), prior: None, capacity: capacity.max(2), active: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// Appends a keyframe reached from the last one through `interval`, then
    /// marginalizes the oldest keyframe if over capacity.
    pub fn push(&mut self, kf: Keyframe, interval: Option<KeyframeInterval>, ctx: &MftoContext) {
        if let Some(iv) = interval {
            if !self.keyframes.is_empty() {
                self.intervals.push_back(iv);
            }
        }
        self.keyframes.push_back(kf);
        if self.keyframes.len() > self.capacity {
            self.prior = marginalize(self, ctx);
            self.keyframes.pop_front();
            self.intervals.pop_front();
        }
    }
}

/// Fixed configuration shared by the MFTO routines.
#[derive(Debug, Clone)]
pub struct MftoContext {
    pub reference: RobotId,
    pub extrinsics: Vec<Extrinsics>,
    pub noise: NoiseConfig,
}

/// Parameter block indices of an MFTO problem.
#[derive(Debug, Clone, Default)]
pub struct MftoLayout {
    /// `robot[node][j] = [p, v, q]`.
    pub robot: Vec<Vec<Option<[usize; 3]>>>,
    pub aux: Vec<[usize; 3]>,
    pub gravity: Vec<Option<usize>>,
    pub reference_inertial: usize,
    pub target_inertial: usize,
}

/// Which parts of a node participate in a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRole {
    pub frozen: bool,
    pub measurements: bool,
}

/// Builds the MFTO problem over `nodes` joined by `intervals`. The prior, if
/// given, binds node 0.
pub fn build_mfto_problem(
    nodes: &[&Keyframe],
    intervals: &[&KeyframeInterval],
    roles: &[NodeRole],
    active: &[bool],
    prior: Option<&MarginalizationPrior>,
    ctx: &MftoContext,
) -> (Problem, MftoLayout) {
    let n = active.len();
    let r = ctx.reference.index();
    let noise = &ctx.noise;
    let mut problem = Problem::new();
    let ref_p = problem.add_block(ParameterBlock::euclidean(&[0.0; 3]).frozen(true));
    let ref_v = problem.add_block(ParameterBlock::euclidean(&[0.0; 3]).frozen(true));
    let ref_q = problem.add_block(ParameterBlock::quaternion(&Quat::identity()).frozen(true));
    let mut layout = MftoLayout::default();
    // keyframe-major ordering keeps the Hessian banded
    for (a, node) in nodes.iter().enumerate() {
        let frozen = roles[a].frozen;
        let mut ids = vec![None; n];
        for j in 0..n {
            if j == r {
                ids[j] = Some([ref_p, ref_v, ref_q]);
            } else if active[j] {
                let s = &node.states[j];
                let p = problem.add_block(ParameterBlock::euclidean(s.position.as_slice()).frozen(frozen));
                let v = problem.add_block(ParameterBlock::euclidean(s.velocity.as_slice()).frozen(frozen));
                let q = problem.add_block(ParameterBlock::quaternion(&s.orientation).frozen(frozen));
                ids[j] = Some([p, v, q]);
            }
        }
        layout.robot.push(ids);
        let g = match (noise.gravity_enabled && roles[a].measurements, node.gravity) {
            (true, Some(g)) => Some(problem.add_block(ParameterBlock::unit_sphere(&g).frozen(frozen))),
            _ => None,
        };
        layout.gravity.push(g);
        if a < intervals.len() {
            let aux = &intervals[a].aux;
            let frozen_aux = roles[a].frozen && roles[a + 1].frozen;
            layout.aux.push([
                problem.add_block(ParameterBlock::euclidean(aux.position.as_slice()).frozen(frozen_aux)),
                problem.add_block(ParameterBlock::euclidean(aux.velocity.as_slice()).frozen(frozen_aux)),
                problem.add_block(ParameterBlock::quaternion(&aux.orientation).frozen(frozen_aux)),
            ]);
        }
    }
    if let Some(pr) = prior {
        let blocks: Vec<usize> =
            pr.robots.iter().flat_map(|&j| layout.robot[0][j].expect("prior robot is active").to_vec()).collect();
        problem.add_residual(ResidualBlock::new(PriorFactor { prior: pr.clone() }, blocks));
    }
    for (a, iv) in intervals.iter().enumerate() {
        let [xp, xv, xq] = layout.aux[a];
        let pre_r = &iv.preints[r];
        problem.add_residual(
            ResidualBlock::new(ReferenceInertialFactor::new(pre_r), vec![xp, xv, xq])
                .with_sqrt_information(inertial_sqrt_information(pre_r)),
        );
        layout.reference_inertial += 1;
        for j in (0..n).filter(|&j| j != r && active[j]) {
            let [pa, va, qa] = layout.robot[a][j].unwrap();
            let [pb, vb, qb] = layout.robot[a + 1][j].unwrap();
            let pre = &iv.preints[j];
            problem.add_residual(
                ResidualBlock::new(TargetInertialFactor::new(pre), vec![pa, va, qa, pb, vb, qb, xp, xv, xq])
                    .with_sqrt_information(inertial_sqrt_information(pre)),
            );
            layout.target_inertial += 1;
        }
    }
    for (a, node) in nodes.iter().enumerate() {
        if !roles[a].measurements {
            continue;
        }
        let ids = &layout.robot[a];
        let pq = |j: usize| ids.get(j).copied().flatten().map(|b| (b[0], b[2]));
        for d in &node.frame.distances {
            if let (Some((pi, qi)), Some((pj, qj))) = (pq(d.from.index()), pq(d.to.index())) {
                problem.add_residual(
                    ResidualBlock::new(DistanceFactor::new(d, &ctx.extrinsics), vec![pi, qi, pj, qj])
                        .with_sigma(noise.sigma_d)
                        .with_loss(Loss::Huber(HUBER_DELTA)),
                );
            }
        }
        for (k, b) in node.frame.bearings.iter().enumerate() {
            if !node.mask.keep.get(k).copied().unwrap_or(true) {
                continue;
            }
            if let (Some((pi, qi)), Some((pj, qj))) = (pq(b.observer.index()), pq(b.target.index())) {
                problem.add_residual(
                    ResidualBlock::new(BearingFactor::new(b, &ctx.extrinsics), vec![pi, qi, pj, qj])
                        .with_sigma(noise.sigma_b)
                        .with_loss(Loss::Huber(HUBER_DELTA)),
                );
            }
        }
        if let Some(gb) = layout.gravity[a] {
            for j in 0..n {
                let Some((_, qj)) = pq(j) else { continue };
                if let Some(m) = node.frame.gravity_of(RobotId(j as u32)) {
                    problem.add_residual(
                        ResidualBlock::new(GravityFactor { direction: m.direction }, vec![qj, gb]).with_sigma(noise.sigma_g),
                    );
                }
            }
        }
    }
    (problem, layout)
}

fn read_back(
    problem: &Problem,
    layout: &MftoLayout,
    nodes: &mut [&mut Keyframe],
    intervals: &mut [&mut KeyframeInterval],
    reference: usize,
) {
    for (a, node) in nodes.iter_mut().enumerate() {
        for (j, ids) in layout.robot[a].iter().enumerate() {
            if j == reference {
                continue;
            }
            if let Some([p, v, q]) = ids {
                let s = &mut node.states[j];
                s.position = problem.block(*p).vec3();
                s.velocity = problem.block(*v).vec3();
                s.orientation = problem.block(*q).quat();
            }
        }
        if let Some(g) = layout.gravity[a] {
            node.gravity = Some(problem.block(g).vec3());
        }
    }
    for (a, iv) in intervals.iter_mut().enumerate() {
        let [p, v, q] = layout.aux[a];
        iv.aux = AuxiliaryState { position: problem.block(p).vec3(), velocity: problem.block(v).vec3(), orientation: problem.block(q).quat() };
    }
}

/// Full-window MFTO solve; states are written back into the window.
pub fn run_mfto(window: &mut SlidingWindow, ctx: &MftoContext, max_iterations: usize) -> Result<SolveReport> {
    let roles = vec![NodeRole { frozen: false, measurements: true }; window.len()];
    let (mut problem, layout) = {
        let nodes: Vec<&Keyframe> = window.keyframes.iter().collect();
        let ivs: Vec<&KeyframeInterval> = window.intervals.iter().collect();
        build_mfto_problem(&nodes, &ivs, &roles, &window.active, window.prior.as_ref(), ctx)
    };
    let opts = SolverOptions { max_iterations, ..SolverOptions::default() };
    let report = problem.solve(&opts).map_err(|e| Error::Solver(e.to_string()))?;
    let mut nodes: Vec<&mut Keyframe> = window.keyframes.iter_mut().collect();
    let mut ivs: Vec<&mut KeyframeInterval> = window.intervals.iter_mut().collect();
    read_back(&problem, &layout, &mut nodes, &mut ivs, ctx.reference.index());
    Ok(report)
}

/// Solves the latest (non-key) frame. Keyframes stay fixed unless the window
/// holds a single keyframe, which is then solved together with the latest frame.
pub fn run_mfto_latest(
    window: &mut SlidingWindow,
    latest: &mut Keyframe,
    interval: &mut KeyframeInterval,
    ctx: &MftoContext,
    max_iterations: usize,
) -> Result<SolveReport> {
    let lone = window.len() == 1;
    let last = window.keyframes.back_mut().ok_or(Error::InsufficientConstraints)?;
    let roles = [NodeRole { frozen: !lone, measurements: lone }, NodeRole { frozen: false, measurements: true }];
    let (mut problem, layout) = build_mfto_problem(&[&*last, &*latest], &[&*interval], &roles, &window.active, None, ctx);
    let opts = SolverOptions { max_iterations, ..SolverOptions::default() };
    let report = problem.solve(&opts).map_err(|e| Error::Solver(e.to_string()))?;
    read_back(&problem, &layout, &mut [last, latest], &mut [interval], ctx.reference.index());
    Ok(report)
}

/// Schur-complement prior on keyframe 1 from everything touching keyframe 0,
/// its interval and its gravity.
pub fn marginalize(window: &SlidingWindow, ctx: &MftoContext) -> Option<MarginalizationPrior> {
    if window.len() < 2 {
        return None;
    }
    let roles = [NodeRole { frozen: false, measurements: true }, NodeRole { frozen: false, measurements: false }];
    let nodes = [&window.keyframes[0], &window.keyframes[1]];
    let (problem, layout) = build_mfto_problem(&nodes, &[&window.intervals[0]], &roles, &window.active, window.prior.as_ref(), ctx);
    let (h, g, offsets) = problem.normal_equations().ok()?;
    let r = ctx.reference.index();
    let tangent = |b: usize| -> Vec<usize> {
        match offsets[b] {
            Some(o) => (o..o + problem.block(b).kind.tangent_dim()).collect(),
            None => Vec::new(),
        }
    };
    let mut keep = Vec::new();
    let mut robots = Vec::new();
    let mut linearization = Vec::new();
    for (j, ids) in layout.robot[1].iter().enumerate() {
        if j == r {
            continue;
        }
        if let Some(blocks) = ids {
            robots.push(j);
            linearization.push(window.keyframes[1].states[j]);
            for b in blocks {
                keep.extend(tangent(*b));
            }
        }
    }
    if robots.is_empty() {
        return None;
    }
    let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();
    let drop: Vec<usize> = (0..h.nrows()).filter(|i| !keep_set.contains(i)).collect();
    let hrr = h.select_rows(&keep).select_columns(&keep);
    let hrm = h.select_rows(&keep).select_columns(&drop);
    let hmm = h.select_rows(&drop).select_columns(&drop);
    let gr = g.select_rows(&keep);
    let gm = g.select_rows(&drop);
    let (h_star, g_star) = if drop.is_empty() {
        (hrr, gr)
    } else {
        let hmm_inv = pseudo_inverse_sym(&hmm);
        (&hrr - &hrm * &hmm_inv * hrm.transpose(), &gr - &hrm * &hmm_inv * &gm)
    };
    let h_star = 0.5 * (&h_star + h_star.transpose());
    let eig = h_star.symmetric_eigen();
    let emax = eig.eigenvalues.max().max(0.0);
    let tol = emax * 1e-10;
    let mut rows = Vec::new();
    let mut res = Vec::new();
    for k in 0..eig.eigenvalues.len() {
        let s = eig.eigenvalues[k];
        if s > tol && s > 0.0 {
            let v = eig.eigenvectors.column(k);
            rows.push(v.transpose() * s.sqrt());
            res.push(v.dot(&g_star) / s.sqrt());
        }
    }
    let m = keep.len();
    let jacobian = if rows.is_empty() { DMatrix::zeros(1, m) } else { DMatrix::from_rows(&rows) };
    let residual = if res.is_empty() { DVector::zeros(1) } else { DVector::from_vec(res) };
    Some(MarginalizationPrior { residual, jacobian, robots, linearization })
}

fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let m = 0.5 * (m + m.transpose());
    let eig = m.symmetric_eigen();
    let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = emax * 1e-12;
    let inv = eig.eigenvalues.map(|s| if s > tol { 1.0 / s } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

// ---------------------------------------------------------------------------
// MFLO

/// One frame of the MFLO window.
#[derive(Debug, Clone)]
pub struct MfloFrame {
    pub timestamp: Timestamp,
    pub sfre: Option<SfcResult>,
    /// Body-frame gravity per robot; empty unless gravity is used.
    pub gravity: Vec<Option<Vector3<f64>>>,
    /// Per robot, from the previous window frame (identity for the first).
    pub interval: Vec<Preintegration>,
    /// Per robot, from the first window frame.
    pub cumulative: Vec<Preintegration>,
}

/// Inverse of [`propagate_relative`] over a cumulative preintegration.
pub fn back_propagate(state: &RobotState, pre_i: &Preintegration, pre_j: &Preintegration) -> RobotState {
    let dt = pre_i.dt_total;
    let ri = pre_i.rotation();
    let q0 = canonical(pre_i.gamma * state.orientation * pre_j.gamma.inverse());
    let r0 = rot(&q0);
    let v0 = ri * state.velocity - r0 * pre_j.beta + pre_i.beta;
    let p0 = ri * state.position - v0 * dt - r0 * pre_j.alpha + pre_i.alpha;
    RobotState { position: p0, velocity: v0, orientation: q0, ..*state }
}

/// Optimizes the first-frame states `x0` (robots with `Some`) and the
/// first-frame gravity against every single-frame output in the window.
pub fn run_mflo(
    frames: &[MfloFrame],
    x0: &mut [Option<RobotState>],
    rotation_known: &[bool],
    g0: &mut Option<Vector3<f64>>,
    reference: RobotId,
    use_gravity: bool,
    noise: &NoiseConfig,
) -> Result<SolveReport> {
    let r = reference.index();
    let n = x0.len();
    if !frames.iter().any(|f| f.sfre.is_some()) {
        return Err(Error::InsufficientConstraints);
    }
    let mut problem = Problem::new();
    let ref_q = problem.add_block(ParameterBlock::quaternion(&Quat::identity()).frozen(true));
    let mut ids: Vec<Option<[usize; 3]>> = vec![None; n];
    for j in 0..n {
        if j == r {
            continue;
        }
        if let Some(s) = &x0[j] {
            let p = problem.add_block(ParameterBlock::euclidean(s.position.as_slice()));
            let v = problem.add_block(ParameterBlock::euclidean(s.velocity.as_slice()));
            let q = problem.add_block(ParameterBlock::quaternion(&s.orientation).frozen(!rotation_known[j]));
            ids[j] = Some([p, v, q]);
        }
    }
    let g_block = match (use_gravity, *g0) {
        (true, Some(g)) => Some(problem.add_block(ParameterBlock::unit_sphere(&g))),
        _ => None,
    };
    for f in frames {
        let pre_i = &f.cumulative[r];
        if let Some(s) = &f.sfre {
            for j in 0..n {
                let Some([p, v, q]) = ids[j] else { continue };
                if s.position_observable.get(j).copied().unwrap_or(false) {
                    let factor = MfloPositionFactor {
                        p_hat: s.positions[j],
                        rot_i: pre_i.rotation(),
                        alpha_i: pre_i.alpha,
                        alpha_j: f.cumulative[j].alpha,
                        dt: pre_i.dt_total,
                    };
                    problem.add_residual(ResidualBlock::new(factor, vec![p, v, q]).with_sigma(SIGMA_P));
                }
                if let Some(q_hat) = s.orientations.get(j).copied().flatten() {
                    let factor = MfloRotationFactor { q_hat, gamma_i: pre_i.gamma, gamma_j: f.cumulative[j].gamma };
                    problem.add_residual(ResidualBlock::new(factor, vec![q]).with_sigma(SIGMA_Q));
                }
            }
        }
        if let Some(gb) = g_block {
            for (j, z) in f.gravity.iter().enumerate() {
                let Some(z) = z else { continue };
                let q = if j == r { ref_q } else if let Some([_, _, q]) = ids[j] { q } else { continue };
                let factor = PropagatedGravityFactor { direction: *z, gamma: f.cumulative[j].rotation() };
                problem.add_residual(ResidualBlock::new(factor, vec![q, gb]).with_sigma(noise.sigma_g));
            }
        }
    }
    if problem.num_residuals() == 0 || ids.iter().all(|x| x.is_none()) && g_block.is_none() {
        return Err(Error::InsufficientConstraints);
    }
    let report = problem.solve(&SolverOptions::default()).map_err(|e| Error::Solver(e.to_string()))?;
    for j in 0..n {
        if let (Some([p, v, q]), Some(s)) = (ids[j], x0[j].as_mut()) {
            s.position = problem.block(p).vec3();
            s.velocity = problem.block(v).vec3();
            s.orientation = problem.block(q).quat();
        }
    }
    if let Some(gb) = g_block {
        *g0 = Some(problem.block(gb).vec3());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Orchestration

#[derive(Debug, Clone)]
pub struct MfreConfig {
    pub n_robots: usize,
    pub reference: RobotId,
    pub window: usize,
    pub noise: NoiseConfig,
    pub extrinsics: Vec<Extrinsics>,
    pub biases: Vec<Biases>,
    pub mfto_iterations: usize,
    pub run_mfto: bool,
}

impl MfreConfig {
    pub fn new(n_robots: usize, reference: RobotId, noise: NoiseConfig) -> Self {
        MfreConfig {
            n_robots,
            reference,
            window: DEFAULT_WINDOW,
            noise,
            extrinsics: vec![Extrinsics::default(); n_robots],
            biases: vec![Biases::default(); n_robots],
            mfto_iterations: MFTO_MAX_ITERATIONS,
            run_mfto: true,
        }
    }
}

/// Per-frame estimates; `None` where a robot is not (yet) valid.
#[derive(Debug, Clone, PartialEq)]
pub struct MfreOutput {
    pub timestamp: Timestamp,
    pub keyframe: bool,
    pub mflo: Vec<Option<RobotState>>,
    pub mfto: Vec<Option<RobotState>>,
    /// Solver failures or missing constraints this frame.
    pub flags: Vec<String>,
}

/// Streaming estimator for one reference robot, producing MFLO and MFTO
/// estimates for every frame.
#[derive(Debug, Clone)]
pub struct Mfre {
    cfg: MfreConfig,
    ctx: MftoContext,
    imu: Vec<Vec<ImuSample>>,
    frames: VecDeque<MfloFrame>,
    x0: Vec<Option<RobotState>>,
    g0: Option<Vector3<f64>>,
    rotation_known: Vec<bool>,
    /// First and latest frames whose single-frame pose of the robot was fused.
    fused: Vec<Option<(Timestamp, Timestamp)>>,
    last_kf: Option<Timestamp>,
    window: SlidingWindow,
    since_kf: Vec<Preintegration>,
    latest: Option<(Keyframe, KeyframeInterval)>,
}

impl Mfre {
    pub fn new(cfg: MfreConfig) -> Result<Self> {
        let n = cfg.n_robots;
        if cfg.reference.index() >= n {
            return Err(Error::UnknownId(cfg.reference.0));
        }
        if cfg.extrinsics.len() != n || cfg.biases.len() != n {
            return Err(Error::InvalidInput("per-robot configuration has the wrong length".into()));
        }
        cfg.noise.validate()?;
        let ctx = MftoContext { reference: cfg.reference, extrinsics: cfg.extrinsics.clone(), noise: cfg.noise };
        Ok(Mfre {
            window: SlidingWindow::new(cfg.window, n),
            since_kf: cfg.biases.iter().map(Preintegration::identity).collect(),
            imu: vec![Vec::new(); n],
            frames: VecDeque::new(),
            x0: vec![None; n],
            g0: None,
            rotation_known: vec![false; n],
            fused: vec![None; n],
            last_kf: None,
            latest: None,
            ctx,
            cfg,
        })
    }

    pub fn config(&self) -> &MfreConfig {
        &self.cfg
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    /// Robots whose fused single-frame poses span at least `VALID_SPAN`
    /// seconds, which pins the velocity.
    pub fn valid(&self) -> Vec<bool> {
        let r = self.cfg.reference.index();
        (0..self.cfg.n_robots)
            .map(|j| j == r || self.fused[j].is_some_and(|(a, b)| (b.secs() - a.secs()) >= VALID_SPAN))
            .collect()
    }

    pub fn push_imu(&mut self, s: ImuSample) -> Result<()> {
        let buf = self.imu.get_mut(s.robot.index()).ok_or(Error::UnknownId(s.robot.0))?;
        if let Some(last) = buf.last() {
            if s.timestamp <= last.timestamp {
                return Err(Error::NonMonotoneTimestamps);
            }
        }
        buf.push(s);
        Ok(())
    }

    fn prune_imu(&mut self, before: Timestamp) {
        for buf in self.imu.iter_mut() {
            let k = buf.partition_point(|s| s.timestamp < before);
            if k > 1 {
                buf.drain(..k - 1);
            }
        }
    }

    /// Processes one frame with its inlier mask and single-frame output.
    pub fn process(&mut self, frame: &MeasurementFrame, mask: &InlierMask, sfre: Option<&SfcResult>) -> Result<MfreOutput> {
        let n = self.cfg.n_robots;
        let r = self.cfg.reference.index();
        let t = frame.timestamp;
        let use_gravity = self.cfg.noise.gravity_enabled;
        let mut flags = Vec::new();

        let interval: Vec<Preintegration> = match self.frames.back() {
            Some(prev) => {
                if t <= prev.timestamp {
                    return Err(Error::NonMonotoneTimestamps);
                }
                let t0 = prev.timestamp;
                (0..n)
                    .map(|j| integrate_between(&self.imu[j], t0, t, &self.cfg.biases[j], &self.cfg.noise))
                    .collect::<Result<_>>()?
            }
            None => self.cfg.biases.iter().map(Preintegration::identity).collect(),
        };
        let cumulative: Vec<Preintegration> = match self.frames.back() {
            Some(prev) => prev.cumulative.iter().zip(&interval).map(|(c, i)| c.compose(i)).collect(),
            None => interval.clone(),
        };
        for j in 0..n {
            self.since_kf[j] = self.since_kf[j].compose(&interval[j]);
        }
        let gravity: Vec<Option<Vector3<f64>>> = if use_gravity {
            (0..n).map(|j| frame.gravity_of(RobotId(j as u32)).map(|g| g.direction)).collect()
        } else {
            Vec::new()
        };
        self.frames.push_back(MfloFrame { timestamp: t, sfre: sfre.cloned(), gravity, interval, cumulative });
        self.prune_imu(t);

        let keyframe = is_keyframe(t, self.last_kf, sfre.is_some());
        let kf_interval = self.since_kf.clone();
        if keyframe {
            self.last_kf = Some(t);
            self.since_kf = self.cfg.biases.iter().map(Preintegration::identity).collect();
        }

        // MFLO: slide, initialize new robots, solve, propagate
        if keyframe && self.window.len() + 1 > self.window.capacity {
            self.slide_mflo();
        }
        self.initialize_mflo(use_gravity);
        if let Some(s) = sfre {
            for j in 0..n {
                if self.rotation_known[j] && s.position_observable.get(j).copied().unwrap_or(false) {
                    let first = self.fused[j].map_or(t, |(a, _)| a);
                    self.fused[j] = Some((first, t));
                }
            }
        }
        let mflo_states = match run_mflo(
            &Vec::from(self.frames.clone()),
            &mut self.x0,
            &self.rotation_known,
            &mut self.g0,
            self.cfg.reference,
            use_gravity,
            &self.cfg.noise,
        ) {
            Ok(_) => self.propagate_latest(),
            Err(e) => {
                flags.push(format!("mflo: {e}"));
                self.propagate_latest()
            }
        };
        let valid = self.valid();
        let mflo: Vec<Option<RobotState>> = (0..n)
            .map(|j| if j == r { Some(RobotState::identity()) } else if valid[j] { mflo_states[j] } else { None })
            .collect();

        // MFTO
        let mut mfto = vec![None; n];
        if self.cfg.run_mfto {
            let latest_gravity = if use_gravity {
                frame.gravity_of(self.cfg.reference).map(|g| g.direction).or_else(|| self.mflo_gravity_at_latest())
            } else {
                None
            };
            if keyframe {
                self.push_mfto_keyframe(frame, mask, &mflo_states, &kf_interval, latest_gravity);
                match run_mfto(&mut self.window, &self.ctx, self.cfg.mfto_iterations) {
                    Ok(_) => {}
                    Err(e) => flags.push(format!("mfto: {e}")),
                }
                self.latest = None;
                let last = self.window.keyframes.back().unwrap();
                for j in 0..n {
                    if self.window.active[j] || j == r {
                        mfto[j] = Some(if j == r { RobotState::identity() } else { last.states[j] });
                    }
                }
            } else if let Some(last) = self.window.keyframes.back() {
                let last = last.clone();
                let mut node = Keyframe { timestamp: t, frame: frame.clone(), mask: mask.clone(), states: vec![RobotState::identity(); n], gravity: latest_gravity };
                for j in 0..n {
                    if j != r && self.window.active[j] {
                        node.states[j] = propagate_relative(&last.states[j], &kf_interval[r], &kf_interval[j])?;
                    }
                }
                let mut iv = KeyframeInterval { preints: kf_interval.clone(), aux: AuxiliaryState::from_preint(&kf_interval[r]) };
                if let Err(e) = run_mfto_latest(&mut self.window, &mut node, &mut iv, &self.ctx, self.cfg.mfto_iterations) {
                    flags.push(format!("mfto: {e}"));
                }
                for j in 0..n {
                    if self.window.active[j] || j == r {
                        mfto[j] = Some(if j == r { RobotState::identity() } else { node.states[j] });
                    }
                }
                self.latest = Some((node, iv));
            }
        }
        Ok(MfreOutput { timestamp: t, keyframe, mflo, mfto, flags })
    }

    fn initialize_mflo(&mut self, use_gravity: bool) {
        let r = self.cfg.reference.index();
        for j in 0..self.cfg.n_robots {
            if j == r || self.rotation_known[j] {
                continue;
            }
            let hit = self.frames.iter().find_map(|f| {
                let s = f.sfre.as_ref()?;
                let q = s.orientations.get(j).copied().flatten()?;
                s.position_observable[j].then(|| (RobotState::new(s.positions[j], Vector3::zeros(), q), f))
            });
            if let Some((state, f)) = hit {
                let mut x = back_propagate(&state, &f.cumulative[r], &f.cumulative[j]);
                x.accel_bias = self.cfg.biases[j].accel;
                x.gyro_bias = self.cfg.biases[j].gyro;
                self.x0[j] = Some(x);
                self.rotation_known[j] = true;
            }
        }
        if use_gravity && self.g0.is_none() {
            self.g0 = self.frames.iter().find_map(|f| {
                let z = f.gravity.get(r).copied().flatten()?;
                Some(f.cumulative[r].rotation() * z)
            });
        }
    }

    /// States at every window frame from the current first-frame states.
    fn propagate_at(&self, k: usize) -> Vec<Option<RobotState>> {
        let r = self.cfg.reference.index();
        let f = &self.frames[k];
        (0..self.cfg.n_robots)
            .map(|j| {
                if j == r {
                    return Some(RobotState::identity());
                }
                let x = self.x0[j].as_ref()?;
                propagate_relative(x, &f.cumulative[r], &f.cumulative[j]).ok()
            })
            .collect()
    }

    fn propagate_latest(&self) -> Vec<Option<RobotState>> {
        self.propagate_at(self.frames.len() - 1)
    }

    fn mflo_gravity_at_latest(&self) -> Option<Vector3<f64>> {
        let r = self.cfg.reference.index();
        let g = self.g0?;
        Some(self.frames.back()?.cumulative[r].rotation().transpose() * g)
    }

    /// Drops MFLO frames before the second keyframe, which becomes the new
    /// window start.
    fn slide_mflo(&mut self) {
        let Some(next_kf) = self.window.keyframes.get(1).map(|k| k.timestamp) else { return };
        let Some(k) = self.frames.iter().position(|f| f.timestamp == next_kf) else { return };
        let r = self.cfg.reference.index();
        let states = self.propagate_at(k);
        let pre_r = self.frames[k].cumulative[r];
        for j in 0..self.cfg.n_robots {
            if j != r && self.x0[j].is_some() {
                self.x0[j] = states[j];
            }
        }
        self.g0 = self.g0.map(|g| (pre_r.rotation().transpose() * g).normalize());
        self.frames.drain(..k);
        let biases = &self.cfg.biases;
        let mut acc: Vec<Preintegration> = biases.iter().map(Preintegration::identity).collect();
        for (idx, f) in self.frames.iter_mut().enumerate() {
            if idx == 0 {
                f.interval = biases.iter().map(Preintegration::identity).collect();
            }
            acc = acc.iter().zip(&f.interval).map(|(a, i)| a.compose(i)).collect();
            f.cumulative = acc.clone();
        }
    }

    fn push_mfto_keyframe(
        &mut self,
        frame: &MeasurementFrame,
        mask: &InlierMask,
        mflo_states: &[Option<RobotState>],
        kf_interval: &[Preintegration],
        gravity: Option<Vector3<f64>>,
    ) {
        let n = self.cfg.n_robots;
        let r = self.cfg.reference.index();
        let valid = self.valid();
        let mut states = vec![RobotState::identity(); n];
        let prev = self.window.keyframes.back();
        for j in 0..n {
            if j == r {
                continue;
            }
            if self.window.active[j] {
                let last = prev.expect("active robots imply a keyframe");
                states[j] = propagate_relative(&last.states[j], &kf_interval[r], &kf_interval[j]).unwrap_or(last.states[j]);
            } else if let Some(s) = mflo_states[j] {
                states[j] = s;
            }
        }
        // robots turning valid enter MFTO with MFLO states at every keyframe
        let newly: Vec<usize> = (0..n).filter(|&j| j != r && valid[j] && !self.window.active[j]).collect();
        if !newly.is_empty() {
            let times: Vec<Timestamp> = self.window.keyframes.iter().map(|k| k.timestamp).collect();
            for (a, ts) in times.iter().enumerate() {
                if let Some(k) = self.frames.iter().position(|f| f.timestamp == *ts) {
                    let st = self.propagate_at(k);
                    for &j in &newly {
                        if let Some(s) = st[j] {
                            self.window.keyframes[a].states[j] = s;
                        }
                    }
                }
            }
            for &j in &newly {
                self.window.active[j] = true;
            }
        }
        let kf = Keyframe { timestamp: frame.timestamp, frame: frame.clone(), mask: mask.clone(), states, gravity };
        let interval = KeyframeInterval { preints: kf_interval.to_vec(), aux: AuxiliaryState::from_preint(&kf_interval[r]) };
        self.window.push(kf, Some(interval), &self.ctx);
    }
}
