//! Single-frame closed-form solver.
//!
//! Pipeline for one synchronized frame: distance matrix, classical MDS
//! embedding in an unknown frame UF, PCM-B bearing rejection, gravity in UF,
//! gravity-up alignment, chirality, per-robot rotation (yaw about gravity or
//! Wahba without gravity) and finally poses relative to the reference robot.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::outlier_pcm::{reject_outliers, InlierMask};
use crate::rotation::{quat_from_matrix, rot_z, OrthogonalMatrix, Quat, RotationMatrix};
use crate::types::{Extrinsics, MeasurementFrame, NoiseConfig, RobotId};

const MIN_BASELINE: f64 = 1e-6;
const COS_SIGMA_FLOOR: f64 = 1e-2;
const RANK_TOL: f64 = 1e-6;
const GATE_SIGMAS: f64 = 5.0;
const CHIRALITY_TIE: f64 = 1e-3;

/// Robot positions in an unknown frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub positions: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl Embedding {
    pub fn contains(&self, i: usize) -> bool {
        i < self.valid.len() && self.valid[i]
    }

    /// Copy with every point transformed by `m`.
    pub fn transformed(&self, m: &Matrix3<f64>) -> Embedding {
        Embedding { positions: self.positions.iter().map(|p| m * p).collect(), valid: self.valid.clone() }
    }

    fn unit_baseline(&self, i: usize, j: usize) -> Option<Vector3<f64>> {
        let d = self.positions[j] - self.positions[i];
        let n = d.norm();
        (n >= MIN_BASELINE).then(|| d / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravitySolution {
    pub g_uf: Vector3<f64>,
    pub constraint_rank: usize,
    pub sign_resolved: bool,
    /// Norm of the least-squares solution before completion to unit length.
    pub raw_norm: f64,
    /// Whitened residual cost of the linear constraints at `g_uf`.
    pub fit_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chirality {
    Original,
    Mirrored,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiralityVerdict {
    pub chosen: Chirality,
    pub score_original: f64,
    pub score_mirrored: f64,
    pub cp_sum: f64,
}

/// Poses relative to the reference robot for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SfcResult {
    pub reference: RobotId,
    pub positions: Vec<Vector3<f64>>,
    /// `Some` exactly where `rotation_observable` holds.
    pub orientations: Vec<Option<Quat>>,
    pub rotation_observable: Vec<bool>,
    pub position_observable: Vec<bool>,
    pub gravity_rf: Option<Vector3<f64>>,
    /// Bearings surviving the consistency gate of the extraction step.
    pub inliers: InlierMask,
}

impl SfcResult {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Full pose of robot `j`, when both parts are observable.
    pub fn pose(&self, j: usize) -> Option<(Vector3<f64>, Quat)> {
        if !self.position_observable[j] {
            return None;
        }
        self.orientations[j].map(|q| (self.positions[j], q))
    }
}

/// Output of [`run_sfc`]. The mask and embedding survive even when the frame
/// yields no pose.
#[derive(Debug, Clone)]
pub struct SfcRun {
    pub embedding: Option<Embedding>,
    pub mask: InlierMask,
    pub result: Result<SfcResult>,
}

/// Symmetric distance matrix over robots `0..n`; both directions of a pair
/// are averaged.
pub fn build_distance_matrix(frame: &MeasurementFrame, n: usize) -> Result<DMatrix<f64>> {
    let mut sum = DMatrix::zeros(n, n);
    let mut count = DMatrix::<f64>::zeros(n, n);
    for d in &frame.distances {
        let (i, j) = (d.from.index(), d.to.index());
        if i >= n || j >= n {
            return Err(Error::InvalidInput(format!("distance between unknown robots {i}, {j}")));
        }
        sum[(i, j)] += d.range;
        sum[(j, i)] += d.range;
        count[(i, j)] += 1.0;
        count[(j, i)] += 1.0;
    }
    let mut missing = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if count[(i, j)] == 0.0 {
                missing.push((RobotId(i as u32), RobotId(j as u32)));
            } else {
                let v = sum[(i, j)] / count[(i, j)];
                sum[(i, j)] = v;
                sum[(j, i)] = v;
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteDistanceMatrix { missing });
    }
    Ok(sum)
}

/// Classical MDS: `B = -1/2 H D^2 H`, `X = V Lambda^(1/2)` over the three
/// largest eigenvalues (negative ones clamped to zero).
pub fn mds_embed(d: &DMatrix<f64>) -> Embedding {
    let n = d.nrows();
    let d2 = d.map(|x| x * x);
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &h * d2 * &h;
    let b = 0.5 * (&b + b.transpose());
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut positions = vec![Vector3::zeros(); n];
    for (axis, &k) in order.iter().take(3).enumerate() {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        let col = eig.eigenvectors.column(k);
        // fix the eigenvector sign so the result is reproducible
        let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            positions[i][axis] = sign * s * col[i];
        }
    }
    let centroid = positions.iter().sum::<Vector3<f64>>() / n as f64;
    for p in positions.iter_mut() {
        *p -= centroid;
    }
    Embedding { positions, valid: vec![true; n] }
}

fn body_bearing(frame: &MeasurementFrame, k: usize, ext: &[Extrinsics]) -> Vector3<f64> {
    let b = &frame.bearings[k];
    ext[b.observer.index()].cam_rotation.matrix() * b.direction
}

/// Inlier bearings of `observer` as `(index, body direction, UF baseline)`.
fn observer_pairs(
    frame: &MeasurementFrame,
    observer: usize,
    embedding: &Embedding,
    ext: &[Extrinsics],
    mask: &InlierMask,
) -> Vec<(usize, Vector3<f64>, Vector3<f64>)> {
    frame
        .bearings_of(RobotId(observer as u32))
        .into_iter()
        .filter(|&k| mask.keep[k])
        .filter_map(|k| {
            let t = frame.bearings[k].target.index();
            if !embedding.contains(observer) || !embedding.contains(t) {
                return None;
            }
            embedding.unit_baseline(observer, t).map(|p| (k, body_bearing(frame, k, ext), p))
        })
        .collect()
}

fn observers(frame: &MeasurementFrame, n: usize) -> Vec<usize> {
    (0..n).collect::<Vec<_>>().into_iter().filter(|&i| frame.bearings.iter().any(|b| b.observer.index() == i)).collect()
}

/// Gravity direction in UF from the bearing-gravity angles of every observer.
pub fn estimate_gravity(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
) -> Result<GravitySolution> {
    let n = embedding.positions.len();
    let sigma_theta = (noise.sigma_b.powi(2) + noise.sigma_g.powi(2)).sqrt();
    let mut g_mat = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    let mut cc = 0.0;
    // per-observer bearing planes for the rank-2 sign test: (UF normal, measured normal . z_g)
    let mut planes: Vec<(Vector3<f64>, f64)> = Vec::new();
    for i in observers(frame, n) {
        let Some(zg) = frame.gravity_of(RobotId(i as u32)).map(|g| g.direction) else { continue };
        let pairs = observer_pairs(frame, i, embedding, ext, mask);
        for (_, u, p) in &pairs {
            let c = u.dot(&zg).clamp(-1.0, 1.0);
            let theta = c.acos();
            let s = (theta.sin() * sigma_theta).max(COS_SIGMA_FLOOR);
            let row = p / s;
            g_mat += row * row.transpose();
            rhs += row * (c / s);
            cc += (c / s).powi(2);
        }
        for a in 0..pairs.len() {
            for b in a + 1..pairs.len() {
                let n_uf = pairs[a].2.cross(&pairs[b].2);
                let n_meas = pairs[a].1.cross(&pairs[b].1);
                if n_uf.norm() > 1e-3 {
                    planes.push((n_uf, n_meas.dot(&zg)));
                }
            }
        }
    }
    let svd = g_mat.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return Err(Error::GravityUnderconstrained { rank: 0 });
    }
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * RANK_TOL).count();
    if rank < 2 {
        return Err(Error::GravityUnderconstrained { rank });
    }
    let mut g = Vector3::zeros();
    for k in 0..3 {
        let s = svd.singular_values[k];
        if s > smax * RANK_TOL {
            g += v_t.row(k).transpose() * (u.column(k).dot(&rhs) / s);
        }
    }
    let raw_norm = g.norm();
    let mut sign_resolved = true;
    if rank == 2 {
        let k = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        let null = v_t.row(k).transpose();
        let m = (1.0 - raw_norm * raw_norm).max(0.0).sqrt();
        let plus = g + null * m;
        let minus = g - null * m;
        if m > 1e-9 {
            let err = |c: &Vector3<f64>| -> f64 { planes.iter().map(|(n, meas)| (n.dot(c) - meas).powi(2)).sum() };
            if planes.is_empty() {
                sign_resolved = false;
            } else {
                let (ep, em) = (err(&plus), err(&minus));
                g = if ep <= em { plus } else { minus };
                sign_resolved = (ep - em).abs() > 1e-12;
            }
        }
        if !sign_resolved {
            return Err(Error::GravityUnderconstrained { rank });
        }
    }
    let norm = g.norm();
    if norm < 1e-9 {
        return Err(Error::GravityUnderconstrained { rank });
    }
    let g_uf = g / norm;
    let fit_cost = (g_uf.dot(&(g_mat * g_uf)) - 2.0 * g_uf.dot(&rhs) + cc).max(0.0);
    Ok(GravitySolution { g_uf, constraint_rank: rank, sign_resolved, raw_norm, fit_cost })
}

/// Smallest rotation taking unit `g` onto `+z`.
pub fn rotation_to_z(g: &Vector3<f64>) -> Matrix3<f64> {
    let g = g.normalize();
    let z = Vector3::z();
    let axis = g.cross(&z);
    let s = axis.norm();
    let c = g.dot(&z);
    if s < 1e-12 {
        return if c > 0.0 { Matrix3::identity() } else { Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)) };
    }
    crate::rotation::rot_exp(&(axis / s * s.atan2(c)))
}

/// Rotates the embedding so that gravity points along `+z`.
pub fn align_gravity_to_z(embedding: &Embedding, g: &GravitySolution) -> (Embedding, RotationMatrix) {
    let r = rotation_to_z(&g.g_uf);
    (embedding.transformed(&r), RotationMatrix::new(r).expect("rotation"))
}

/// Weighted Wahba problem: maximize `sum w_k ref_k^T R body_k`. Returns the
/// unconstrained orthogonal optimum `G` and the best proper rotation `R`.
pub fn solve_wahba(body: &[(Vector3<f64>, f64)], refs: &[Vector3<f64>]) -> Result<(OrthogonalMatrix, RotationMatrix)> {
    if body.len() != refs.len() {
        return Err(Error::InvalidInput("direction lists differ in length".into()));
    }
    let spans = |dirs: &mut dyn Iterator<Item = Vector3<f64>>| {
        let dirs: Vec<Vector3<f64>> = dirs.collect();
        dirs.iter().any(|a| dirs.iter().any(|b| a.normalize().cross(&b.normalize()).norm() > 1e-8))
    };
    if body.len() < 2 || !spans(&mut body.iter().map(|b| b.0)) || !spans(&mut refs.iter().copied()) {
        return Err(Error::DegenerateDirections);
    }
    let mut b = Matrix3::zeros();
    for ((d, w), r) in body.iter().zip(refs) {
        b += *w * r * d.transpose();
    }
    let svd = b.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &c| sv[c].total_cmp(&sv[a]));
    let [a, c, last] = order;
    let (ua, uc) = (u.column(a).into_owned(), u.column(c).into_owned());
    let (va, vc) = (v_t.row(a).transpose(), v_t.row(c).transpose());
    // completing the third axis by cross products yields the proper rotation
    // directly and stays valid when B has rank two
    let r = ua * va.transpose() + uc * vc.transpose() + ua.cross(&uc) * va.cross(&vc).transpose();
    let g = if sv[last] > sv[a] * 1e-12 { u * v_t } else { r };
    Ok((
        OrthogonalMatrix::new(g).map_err(|_| Error::DegenerateDirections)?,
        RotationMatrix::new(r).map_err(|_| Error::DegenerateDirections)?,
    ))
}

/// Coplanarity `lambda_3 / (lambda_1 + lambda_2 + lambda_3)` of the
/// sigma-scaled directions plus the origin (mean removed). Fewer than three
/// directions give 0.
pub fn coplanarity(dirs: &[(Vector3<f64>, f64)]) -> f64 {
    if dirs.len() < 3 {
        return 0.0;
    }
    // the observer itself enters as the origin
    let mut pts: Vec<Vector3<f64>> = dirs.iter().map(|(d, s)| d / *s).collect();
    pts.push(Vector3::zeros());
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut c = Matrix3::zeros();
    for p in &pts {
        let q = p - mean;
        c += q * q.transpose();
    }
    c /= pts.len() as f64;
    let ev = c.symmetric_eigenvalues();
    let total = ev.sum();
    if total <= 0.0 {
        return 0.0;
    }
    ev.min().max(0.0) / total
}

/// Reflection used as the chirality alternative: negate the first axis.
pub fn mirror(embedding: &Embedding) -> Embedding {
    embedding.transformed(&Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)))
}

fn chirality_terms(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    gravity: Option<&Vector3<f64>>,
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
) -> (f64, f64) {
    let n = embedding.positions.len();
    let mut score = 0.0;
    let mut cp_sum = 0.0;
    for i in observers(frame, n) {
        let pairs = observer_pairs(frame, i, embedding, ext, mask);
        let mut body: Vec<(Vector3<f64>, f64)> = pairs.iter().map(|(_, u, _)| (*u, 1.0 / noise.sigma_b)).collect();
        let mut refs: Vec<Vector3<f64>> = pairs.iter().map(|(_, _, p)| *p).collect();
        let mut dirs: Vec<(Vector3<f64>, f64)> = pairs.iter().map(|(_, u, _)| (*u, noise.sigma_b)).collect();
        if let Some(g) = gravity {
            if let Some(zg) = frame.gravity_of(RobotId(i as u32)) {
                body.push((zg.direction, 1.0 / noise.sigma_g));
                refs.push(*g);
                dirs.push((zg.direction, noise.sigma_g));
            }
        }
        let cp = coplanarity(&dirs);
        cp_sum += cp;
        if cp > 0.0 {
            if let Ok((g_mat, _)) = solve_wahba(&body, &refs) {
                score += cp * g_mat.det();
            }
        }
    }
    (score, cp_sum)
}

/// Picks between the embedding and its mirror by the coplanarity-weighted
/// vote of per-robot Wahba determinants.
pub fn determine_chirality(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    gravity: Option<&Vector3<f64>>,
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
) -> ChiralityVerdict {
    chirality_between(frame, (embedding, gravity), (&mirror(embedding), gravity), ext, mask, noise)
}

/// Chirality vote between two candidate embeddings, each with its own gravity.
fn chirality_between(
    frame: &MeasurementFrame,
    original: (&Embedding, Option<&Vector3<f64>>),
    mirrored: (&Embedding, Option<&Vector3<f64>>),
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
) -> ChiralityVerdict {
    let (score_original, cp_sum) = chirality_terms(frame, original.0, original.1, ext, mask, noise);
    let (score_mirrored, _) = chirality_terms(frame, mirrored.0, mirrored.1, ext, mask, noise);
    let threshold = (0.5 * cp_sum).max(0.001);
    let best = score_original.max(score_mirrored);
    let chosen = if best <= threshold {
        Chirality::Undetermined
    } else if score_original >= score_mirrored {
        Chirality::Original
    } else {
        Chirality::Mirrored
    };
    ChiralityVerdict { chosen, score_original, score_mirrored, cp_sum }
}

/// Yaw of the observer about gravity. `body` are bearing directions in the
/// body frame, `refs` the matching baselines of a gravity-up embedding and
/// `zg` the body-frame gravity.
pub fn estimate_yaw(body: &[Vector3<f64>], refs: &[Vector3<f64>], zg: &Vector3<f64>) -> Result<f64> {
    if body.is_empty() || body.len() != refs.len() {
        return Err(Error::InvalidInput("yaw needs matching bearings".into()));
    }
    let level = rotation_to_z(zg);
    let (mut s, mut c) = (0.0, 0.0);
    for (b, p) in body.iter().zip(refs) {
        let u = level * b;
        let (ux, uy, px, py) = (u.x, u.y, p.x, p.y);
        let (nu, np) = ((ux * ux + uy * uy).sqrt(), (px * px + py * py).sqrt());
        if nu < 1e-6 || np < 1e-6 {
            return Err(Error::YawDegenerate);
        }
        let psi = ((ux * py - uy * px) / (nu * np)).atan2((ux * px + uy * py) / (nu * np));
        s += psi.sin();
        c += psi.cos();
    }
    Ok(s.atan2(c))
}

/// Rotation `UF <- body` per robot, `None` when unobservable. With gravity the
/// embedding must be gravity-up.
pub fn estimate_rotations(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    use_gravity: bool,
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
) -> Vec<Option<Matrix3<f64>>> {
    let n = embedding.positions.len();
    (0..n)
        .map(|i| {
            let pairs = observer_pairs(frame, i, embedding, ext, mask);
            if pairs.is_empty() {
                return None;
            }
            if use_gravity {
                let zg = frame.gravity_of(RobotId(i as u32))?.direction;
                let body: Vec<Vector3<f64>> = pairs.iter().map(|x| x.1).collect();
                let refs: Vec<Vector3<f64>> = pairs.iter().map(|x| x.2).collect();
                let psi = estimate_yaw(&body, &refs, &zg).ok()?;
                Some(rot_z(psi) * rotation_to_z(&zg))
            } else {
                let body: Vec<(Vector3<f64>, f64)> = pairs.iter().map(|x| (x.1, 1.0 / noise.sigma_b)).collect();
                let refs: Vec<Vector3<f64>> = pairs.iter().map(|x| x.2).collect();
                solve_wahba(&body, &refs).ok().map(|(_, r)| *r.matrix())
            }
        })
        .collect()
}

/// Expresses every robot in the reference robot's frame.
pub fn extract_relative_poses(
    rotations: &[Option<Matrix3<f64>>],
    embedding: &Embedding,
    reference: RobotId,
    gravity_uf: Option<&Vector3<f64>>,
    inliers: InlierMask,
) -> Result<SfcResult> {
    let r = reference.index();
    let r_ref = rotations.get(r).copied().flatten().ok_or(Error::ReferenceUnobservable)?;
    let x_ref = embedding.positions[r];
    let n = embedding.positions.len();
    let positions = (0..n)
        .map(|i| if i == r { Vector3::zeros() } else { r_ref.transpose() * (embedding.positions[i] - x_ref) })
        .collect();
    let orientations: Vec<Option<Quat>> = (0..n)
        .map(|i| {
            if i == r {
                Some(Quat::identity())
            } else {
                rotations[i].map(|ri| quat_from_matrix(&(r_ref.transpose() * ri)))
            }
        })
        .collect();
    Ok(SfcResult {
        reference,
        positions,
        rotation_observable: orientations.iter().map(|o| o.is_some()).collect(),
        orientations,
        position_observable: (0..n).map(|i| embedding.contains(i)).collect(),
        gravity_rf: gravity_uf.map(|g| (r_ref.transpose() * g).normalize()),
        inliers,
    })
}

/// Inlier bearings whose direction disagrees with the candidate poses by
/// more than five standard deviations.
pub fn consistency_gate(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    rotations: &[Option<Matrix3<f64>>],
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
    use_gravity: bool,
) -> Vec<usize> {
    let mut rejected = Vec::new();
    for (k, b) in frame.bearings.iter().enumerate() {
        if !mask.keep[k] {
            continue;
        }
        let (i, j) = (b.observer.index(), b.target.index());
        let Some(ri) = rotations.get(i).copied().flatten() else { continue };
        if !embedding.contains(i) || !embedding.contains(j) {
            continue;
        }
        let d = embedding.positions[j] - embedding.positions[i];
        let len = d.norm();
        if len < MIN_BASELINE {
            continue;
        }
        let predicted = ri.transpose() * d / len;
        let angle = predicted.dot(&body_bearing(frame, k, ext)).clamp(-1.0, 1.0).acos();
        let g_var = if use_gravity { noise.sigma_g.powi(2) } else { 0.0 };
        let sigma = (2.0 * noise.sigma_b.powi(2) + g_var + 2.0 * (noise.sigma_d / len).powi(2)).sqrt();
        if angle > GATE_SIGMAS * sigma {
            rejected.push(k);
        }
    }
    rejected
}

/// Full closed-form pipeline for one frame with `n` robots.
pub fn run_sfc(
    frame: &MeasurementFrame,
    n: usize,
    ext: &[Extrinsics],
    noise: &NoiseConfig,
    reference: RobotId,
    prob_threshold: f64,
) -> SfcRun {
    let d = match build_distance_matrix(frame, n) {
        Ok(d) => d,
        Err(e) => return SfcRun { embedding: None, mask: InlierMask::all(frame.bearings.len()), result: Err(e) },
    };
    let embedding = mds_embed(&d);
    let mask = reject_outliers(frame, &embedding, noise, prob_threshold);
    let result = solve_poses(frame, &embedding, ext, &mask, noise, reference);
    SfcRun { embedding: Some(embedding), mask, result }
}

fn solve_poses(
    frame: &MeasurementFrame,
    embedding: &Embedding,
    ext: &[Extrinsics],
    mask: &InlierMask,
    noise: &NoiseConfig,
    reference: RobotId,
) -> Result<SfcResult> {
    // The sign of a rank-2 gravity solution flips with chirality, so each
    // mirror image gets its own gravity estimate.
    let mirrored = mirror(embedding);
    let gravity = if noise.gravity_enabled {
        match (
            estimate_gravity(frame, embedding, ext, mask, noise),
            estimate_gravity(frame, &mirrored, ext, mask, noise),
        ) {
            (Ok(a), Ok(b)) => Some((a, b)),
            _ => None,
        }
    } else {
        None
    };
    let use_gravity = gravity.is_some();
    let (cand_o, cand_m, g_up) = match &gravity {
        Some((a, b)) => (align_gravity_to_z(embedding, a).0, align_gravity_to_z(&mirrored, b).0, Some(Vector3::z())),
        None => (embedding.clone(), mirrored, None),
    };
    let mut verdict = chirality_between(frame, (&cand_o, g_up.as_ref()), (&cand_m, g_up.as_ref()), ext, mask, noise);
    // near-planar teams vote almost evenly; the gravity fit then decides
    if let Some((a, b)) = &gravity {
        let tied = (verdict.score_original - verdict.score_mirrored).abs() < CHIRALITY_TIE;
        if tied && verdict.chosen != Chirality::Undetermined && a.fit_cost != b.fit_cost {
            verdict.chosen = if a.fit_cost < b.fit_cost { Chirality::Original } else { Chirality::Mirrored };
        }
    }
    let chosen = match verdict.chosen {
        Chirality::Original => cand_o,
        Chirality::Mirrored => cand_m,
        Chirality::Undetermined => return Err(Error::ChiralityUndetermined),
    };
    let mut inliers = mask.clone();
    let mut rotations = estimate_rotations(frame, &chosen, use_gravity, ext, &inliers, noise);
    for _ in 0..2 {
        let rejected = consistency_gate(frame, &chosen, &rotations, ext, &inliers, noise, use_gravity);
        if rejected.is_empty() {
            break;
        }
        for k in rejected {
            inliers.keep[k] = false;
        }
        rotations = estimate_rotations(frame, &chosen, use_gravity, ext, &inliers, noise);
    }
    extract_relative_poses(&rotations, &chosen, reference, g_up.as_ref(), inliers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{quat_log, rot_exp};
    use crate::types::{BearingMeasurement, DistanceMeasurement, GravityMeasurement, Timestamp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ));
        q.to_rotation_matrix().into_inner()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0))).collect()
    }

    struct Scene {
        positions: Vec<Vector3<f64>>,
        rotations: Vec<Matrix3<f64>>,
        frame: MeasurementFrame,
    }

    /// Exact measurements of a scene with world gravity up along `+z`.
    fn scene(positions: Vec<Vector3<f64>>, rotations: Vec<Matrix3<f64>>, gravity: bool) -> Scene {
        let n = positions.len();
        let mut frame = MeasurementFrame::new(Timestamp(0));
        let mut det = 0;
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    let r = (positions[j] - positions[i]).norm();
                    frame.distances.push(DistanceMeasurement::new(RobotId(i as u32), RobotId(j as u32), r, Timestamp(0)).unwrap());
                }
                if i != j {
                    let d = (rotations[i].transpose() * (positions[j] - positions[i])).normalize();
                    frame.bearings.push(BearingMeasurement::new(RobotId(i as u32), RobotId(j as u32), d, Timestamp(0), det).unwrap());
                    det += 1;
                }
            }
            if gravity {
                let g = rotations[i].transpose() * Vector3::z();
                frame.gravities.push(GravityMeasurement::new(RobotId(i as u32), g, Timestamp(0)).unwrap());
            }
        }
        Scene { positions, rotations, frame }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, gravity: bool) -> Scene {
        let p = random_points(rng, n);
        let r = (0..n).map(|_| random_rotation(rng)).collect();
        scene(p, r, gravity)
    }

    fn distances_of(e: &Embedding) -> DMatrix<f64> {
        let n = e.positions.len();
        DMatrix::from_fn(n, n, |i, j| (e.positions[i] - e.positions[j]).norm())
    }

    fn ext(n: usize) -> Vec<Extrinsics> {
        vec![Extrinsics::default(); n]
    }

    #[test]
    fn distance_matrix_rules() {
        let mut f = MeasurementFrame::new(Timestamp(0));
        let m = |a: u32, b: u32, r: f64| DistanceMeasurement::new(RobotId(a), RobotId(b), r, Timestamp(0)).unwrap();
        f.distances = vec![m(0, 1, 3.0), m(1, 2, 4.0), m(0, 2, 5.0)];
        let d = build_distance_matrix(&f, 3).unwrap();
        assert_eq!(d[(0, 1)], 3.0);
        assert_eq!(d[(2, 1)], 4.0);
        assert_eq!(d[(2, 0)], 5.0);
        assert_eq!(d[(1, 1)], 0.0);
        f.distances = vec![m(0, 1, 4.9), m(1, 0, 5.1)];
        assert!((build_distance_matrix(&f, 2).unwrap()[(0, 1)] - 5.0).abs() < 1e-12);
        f.distances = vec![m(0, 1, 1.0), m(0, 2, 1.0), m(0, 3, 1.0), m(1, 2, 1.0), m(1, 3, 1.0)];
        match build_distance_matrix(&f, 4) {
            Err(Error::IncompleteDistanceMatrix { missing }) => assert_eq!(missing, vec![(RobotId(2), RobotId(3))]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mds_two_points_and_tetrahedron() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 7.0, 7.0, 0.0]);
        let e = mds_embed(&d);
        assert!(((e.positions[0] - e.positions[1]).norm() - 7.0).abs() < 1e-12);
        let t = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        let e = mds_embed(&t);
        assert!((distances_of(&e) - t).abs().max() < 1e-10);
        let c: Vector3<f64> = e.positions.iter().sum();
        assert!(c.norm() < 1e-9);
    }

    #[test]
    fn gravity_noiseless_identity_oriented() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = scene(random_points(&mut rng, 6), vec![Matrix3::identity(); 6], true);
        let e = mds_embed(&build_distance_matrix(&s.frame, 6).unwrap());
        let mask = InlierMask::all(s.frame.bearings.len());
        let sol = estimate_gravity(&s.frame, &e, &ext(6), &mask, &NoiseConfig::benchmark()).unwrap();
        assert_eq!(sol.constraint_rank, 3);
        // map the truth into UF with the Procrustes transform between point sets
        let truth = uf_transform(&s.positions, &e);
        assert!((sol.g_uf - truth * Vector3::z()).norm() < 1e-6);
    }

    /// Orthogonal map taking centred world points onto the embedding.
    fn uf_transform(world: &[Vector3<f64>], e: &Embedding) -> Matrix3<f64> {
        let cw = world.iter().sum::<Vector3<f64>>() / world.len() as f64;
        let mut b = Matrix3::zeros();
        for (w, u) in world.iter().zip(&e.positions) {
            b += u * (w - cw).transpose();
        }
        let svd = b.svd(true, true);
        svd.u.unwrap() * svd.v_t.unwrap()
    }

    #[test]
    fn gravity_collinear_is_rank_one() {
        let pts = (0..4).map(|k| Vector3::new(k as f64, 2.0 * k as f64, 0.5)).collect();
        let s = scene(pts, vec![Matrix3::identity(); 4], true);
        let e = mds_embed(&build_distance_matrix(&s.frame, 4).unwrap());
        let r = estimate_gravity(&s.frame, &e, &ext(4), &InlierMask::all(s.frame.bearings.len()), &NoiseConfig::benchmark());
        assert_eq!(r, Err(Error::GravityUnderconstrained { rank: 1 }));
    }

    #[test]
    fn gravity_coplanar_rank_two_sign_resolved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tilt = random_rotation(&mut rng);
        let pts: Vec<Vector3<f64>> =
            (0..5).map(|_| tilt * Vector3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), 0.0)).collect();
        let rots = (0..5).map(|_| random_rotation(&mut rng)).collect();
        let s = scene(pts, rots, true);
        let e = mds_embed(&build_distance_matrix(&s.frame, 5).unwrap());
        let sol = estimate_gravity(&s.frame, &e, &ext(5), &InlierMask::all(s.frame.bearings.len()), &NoiseConfig::benchmark()).unwrap();
        assert_eq!(sol.constraint_rank, 2);
        assert!(sol.sign_resolved);
        // planar embeddings are fixed only up to the in-plane reflection, so
        // test the gravity angles against every baseline instead
        for b in &s.frame.bearings {
            let (i, j) = (b.observer.index(), b.target.index());
            let p = (e.positions[j] - e.positions[i]).normalize();
            let zg = s.frame.gravities[i].direction;
            assert!((p.dot(&sol.g_uf) - b.direction.dot(&zg)).abs() < 1e-6);
        }
        // the normal component must also match the truth
        let normal_uf = (e.positions[1] - e.positions[0]).cross(&(e.positions[2] - e.positions[0])).normalize();
        let bd = |k: usize| s.frame.bearings[k].direction;
        let (k1, k2) = (s.frame.bearings_of(RobotId(0))[0], s.frame.bearings_of(RobotId(0))[1]);
        let nm = bd(k1).cross(&bd(k2));
        let nu = (e.positions[1] - e.positions[0]).normalize().cross(&(e.positions[2] - e.positions[0]).normalize());
        assert!((nu.dot(&sol.g_uf) - nm.dot(&s.frame.gravities[0].direction)).abs() < 1e-6);
        assert!(normal_uf.norm() > 0.0);
    }

    #[test]
    fn gravity_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_scene(&mut rng, 6, true);
        let e = mds_embed(&build_distance_matrix(&s.frame, 6).unwrap());
        let mask = InlierMask::all(s.frame.bearings.len());
        let mut noisy = s.frame.clone();
        for b in noisy.bearings.iter_mut() {
            b.direction = (b.direction + Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 0.02).normalize();
        }
        let a = estimate_gravity(&noisy, &e, &ext(6), &mask, &NoiseConfig::benchmark()).unwrap();
        let mut shuffled = noisy.clone();
        shuffled.bearings.reverse();
        let b = estimate_gravity(&shuffled, &e, &ext(6), &mask, &NoiseConfig::benchmark()).unwrap();
        assert!((a.g_uf - b.g_uf).norm() < 1e-12);
    }

    #[test]
    fn align_examples() {
        let e = Embedding { positions: vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 2.0)], valid: vec![true; 2] };
        let sol = |g: Vector3<f64>| GravitySolution { g_uf: g, constraint_rank: 3, sign_resolved: true, raw_norm: 1.0, fit_cost: 0.0 };
        let (_, r) = align_gravity_to_z(&e, &sol(Vector3::z()));
        assert!((r.matrix() - Matrix3::identity()).norm() < 1e-15);
        let (a, r) = align_gravity_to_z(&e, &sol(Vector3::x()));
        assert!((r.matrix() * Vector3::x() - Vector3::z()).norm() < 1e-12);
        assert!(((a.positions[0] - a.positions[1]).norm() - (e.positions[0] - e.positions[1]).norm()).abs() < 1e-12);
        let (_, r) = align_gravity_to_z(&e, &sol(-Vector3::z()));
        assert!((r.matrix() * -Vector3::z() - Vector3::z()).norm() < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wahba_examples() {
        let body = [(Vector3::x(), 1.0), (Vector3::y(), 1.0)];
        let (_, r) = solve_wahba(&body, &[Vector3::x(), Vector3::y()]).unwrap();
        assert!((r.matrix() - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(
            solve_wahba(&[(Vector3::x(), 1.0), (-Vector3::x(), 1.0)], &[Vector3::y(), -Vector3::y()]),
            Err(Error::DegenerateDirections)
        );
    }

    #[test]
    fn wahba_reflection_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let body: Vec<(Vector3<f64>, f64)> =
            (0..4).map(|_| (Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize(), 1.0)).collect();
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r0 = random_rotation(&mut rng);
        let refs: Vec<Vector3<f64>> = body.iter().map(|(b, _)| r0 * flip * b).collect();
        let (g, r) = solve_wahba(&body, &refs).unwrap();
        assert!((g.det() + 1.0).abs() < 1e-9);
        let score = |m: &Matrix3<f64>| body.iter().zip(&refs).map(|((b, _), f)| f.dot(&(m * b))).sum::<f64>();
        let best = score(r.matrix());
        // 5 degree grid over ZYZ Euler angles
        let step = 5f64.to_radians();
        let mut grid_best = f64::MIN;
        let mut a = 0.0;
        while a < std::f64::consts::TAU {
            let mut b = 0.0;
            while b <= std::f64::consts::PI {
                let mut c = 0.0;
                while c < std::f64::consts::TAU {
                    let m = rot_exp(&(Vector3::z() * a)) * rot_exp(&(Vector3::y() * b)) * rot_exp(&(Vector3::z() * c));
                    grid_best = grid_best.max(score(&m));
                    c += step;
                }
                b += step;
            }
            a += step;
        }
        assert!(best >= grid_best - 1e-12);
        // the grid comes within its resolution of the analytic optimum
        assert!(best - grid_best < 0.05);
    }

    #[test]
    fn coplanarity_examples() {
        let s = |v: Vector3<f64>| (v, 1.0);
        let planar = [s(Vector3::x()), s(Vector3::y()), s(Vector3::new(1.0, 1.0, 0.0).normalize())];
        assert!(coplanarity(&planar) < 1e-10);
        let t = 1.0 / 3f64.sqrt();
        let tet = [
            s(Vector3::new(t, t, t)),
            s(Vector3::new(t, -t, -t)),
            s(Vector3::new(-t, t, -t)),
            s(Vector3::new(-t, -t, t)),
        ];
        assert!((coplanarity(&tet) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(coplanarity(&[s(Vector3::x()), s(Vector3::y())]), 0.0);
    }

    #[test]
    fn yaw_examples() {
        let zg = Vector3::z();
        assert!(estimate_yaw(&[Vector3::x()], &[Vector3::x()], &zg).unwrap().abs() < 1e-12);
        let psi = 30f64.to_radians();
        let target = Vector3::new(0.6, 0.8, 0.3).normalize();
        let body = rot_z(psi).transpose() * target;
        assert!((estimate_yaw(&[body], &[target], &zg).unwrap() - psi).abs() < 1e-9);
        let a = rot_z(-179f64.to_radians()) * Vector3::x();
        let b = rot_z(179f64.to_radians()) * Vector3::x();
        let yaw = estimate_yaw(&[a, b], &[Vector3::x(), Vector3::x()], &zg).unwrap();
        assert!((yaw.abs() - std::f64::consts::PI).abs() < 1e-9);
        assert_eq!(estimate_yaw(&[Vector3::z()], &[Vector3::x()], &zg), Err(Error::YawDegenerate));
    }

    #[test]
    fn rotation_observability_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_scene(&mut rng, 4, true);
        let mut f = s.frame.clone();
        // robot 1 keeps a single bearing, robot 2 none
        let drop: Vec<usize> = f.bearings_of(RobotId(1)).into_iter().skip(1).chain(f.bearings_of(RobotId(2))).collect();
        let keep: Vec<_> = f.bearings.iter().enumerate().filter(|(k, _)| !drop.contains(k)).map(|(_, b)| *b).collect();
        f.bearings = keep;
        let e = mds_embed(&build_distance_matrix(&f, 4).unwrap());
        let mask = InlierMask::all(f.bearings.len());
        let rots = estimate_rotations(&f, &e, true, &ext(4), &mask, &NoiseConfig::benchmark());
        assert!(rots[1].is_some());
        assert!(rots[2].is_none());
        let rots = estimate_rotations(&f, &e, false, &ext(4), &mask, &NoiseConfig::benchmark());
        assert!(rots[1].is_none());
        assert!(rots[0].is_some());
    }

    fn check_exact(s: &Scene, res: &SfcResult, reference: usize) {
        let r_ref = s.rotations[reference];
        for j in 0..s.positions.len() {
            let p_true = r_ref.transpose() * (s.positions[j] - s.positions[reference]);
            assert!((res.positions[j] - p_true).norm() < 1e-6, "position {j}");
            let q_true = quat_from_matrix(&(r_ref.transpose() * s.rotations[j]));
            let q = res.orientations[j].expect("observable");
            assert!(quat_log(&(q.inverse() * q_true)).norm() < 1e-6, "rotation {j}");
        }
    }

    #[test]
    fn noiseless_sfc_recovers_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for gravity in [true, false] {
            let s = random_scene(&mut rng, 6, gravity);
            let noise = NoiseConfig::benchmark().with_gravity(gravity);
            let run = run_sfc(&s.frame, 6, &ext(6), &noise, RobotId(2), 0.95);
            let res = run.result.unwrap();
            check_exact(&s, &res, 2);
            if gravity {
                let g = s.rotations[2].transpose() * Vector3::z();
                assert!((res.gravity_rf.unwrap() - g).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn reference_unobservable_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut s = random_scene(&mut rng, 5, true);
        s.frame.bearings.retain(|b| b.observer != RobotId(0));
        let run = run_sfc(&s.frame, 5, &ext(5), &NoiseConfig::benchmark(), RobotId(0), 0.95);
        assert_eq!(run.result, Err(Error::ReferenceUnobservable));
        s.frame.bearings.retain(|b| b.observer != RobotId(3));
        let res = run_sfc(&s.frame, 5, &ext(5), &NoiseConfig::benchmark(), RobotId(1), 0.95).result.unwrap();
        assert!(res.position_observable[3] && !res.rotation_observable[3]);
        assert!(res.pose(3).is_none());
        assert!(res.orientations[3].is_none());
    }

    #[test]
    fn coplanar_scene_without_gravity_is_undetermined() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let pts = (0..5).map(|_| Vector3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), 1.0)).collect();
        let rots = (0..5).map(|_| random_rotation(&mut rng)).collect();
        let s = scene(pts, rots, false);
        let e = mds_embed(&build_distance_matrix(&s.frame, 5).unwrap());
        let v = determine_chirality(&s.frame, &e, None, &ext(5), &InlierMask::all(s.frame.bearings.len()), &NoiseConfig::benchmark().with_gravity(false));
        assert!(v.cp_sum < 1e-9);
        assert_eq!(v.chosen, Chirality::Undetermined);
    }

    #[test]
    fn two_robots_have_positions_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let s = random_scene(&mut rng, 2, true);
        let run = run_sfc(&s.frame, 2, &ext(2), &NoiseConfig::benchmark(), RobotId(0), 0.95);
        let e = run.embedding.unwrap();
        assert!(((e.positions[0] - e.positions[1]).norm() - (s.positions[0] - s.positions[1]).norm()).abs() < 1e-9);
        assert!(run.result.is_err());
    }

    /// Spread of the point cloud out of its best-fit plane.
    fn planarity(pts: &[Vector3<f64>]) -> f64 {
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let mut c = Matrix3::zeros();
        for p in pts {
            c += (p - mean) * (p - mean).transpose();
        }
        let ev = c.symmetric_eigenvalues();
        ev.min() / ev.sum()
    }

    #[test]
    fn noiseless_scenes_mostly_resolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut solved = 0;
        for k in 0..200 {
            let gravity = k % 2 == 0;
            let s = random_scene(&mut rng, 6, gravity);
            let noise = NoiseConfig::benchmark().with_gravity(gravity);
            if let Ok(res) = run_sfc(&s.frame, 6, &ext(6), &noise, RobotId(0), 0.95).result {
                check_exact(&s, &res, 0);
                solved += 1;
            }
        }
        assert!(solved >= 190, "{solved}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn mds_reconstructs_distances(seed in 0u64..100_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, n);
            let d = DMatrix::from_fn(n, n, |i, j| (pts[i] - pts[j]).norm());
            let e = mds_embed(&d);
            prop_assert!((distances_of(&e) - d).abs().max() < 1e-9);
        }

        #[test]
        fn wahba_recovers_generator(seed in 0u64..100_000, k in 3usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r0 = random_rotation(&mut rng);
            let body: Vec<(Vector3<f64>, f64)> = (0..k)
                .map(|_| (Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize(), rng.gen_range(0.5..2.0)))
                .collect();
            let refs: Vec<Vector3<f64>> = body.iter().map(|(b, _)| r0 * b).collect();
            let (_, r) = solve_wahba(&body, &refs).unwrap();
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
            let err = crate::rotation::rot_log(&(r.matrix().transpose() * r0)).norm();
            prop_assert!(err < 1e-8);
        }

        #[test]
        fn yaw_shift_is_exact(seed in 0u64..100_000, phi in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r0 = random_rotation(&mut rng);
            let targets: Vec<Vector3<f64>> =
                (0..3).map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize()).collect();
            let yaw_of = |r: &Matrix3<f64>| {
                let body: Vec<Vector3<f64>> = targets.iter().map(|t| r.transpose() * t).collect();
                estimate_yaw(&body, &targets, &(r.transpose() * Vector3::z())).unwrap()
            };
            let a = yaw_of(&r0);
            let b = yaw_of(&(rot_z(phi) * r0));
            let diff = (b - a - phi).rem_euclid(std::f64::consts::TAU);
            prop_assert!(diff.min(std::f64::consts::TAU - diff) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn chirality_matches_generator(seed in 0u64..1_000_000, n in 4usize..8, mirrored in proptest::bool::ANY, gravity in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_scene(&mut rng, n, gravity);
            prop_assume!(planarity(&s.positions) > 0.01);
            if mirrored {
                // measurements of the mirror world: the distance embedding is
                // identical, so the chosen chirality must flip
                let f = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
                let pts: Vec<Vector3<f64>> = s.positions.iter().map(|p| f * p).collect();
                s = scene(pts, s.rotations.clone(), gravity);
            }
            let noise = NoiseConfig::benchmark().with_gravity(gravity);
            let mask = InlierMask::all(s.frame.bearings.len());
            let e = mds_embed(&build_distance_matrix(&s.frame, n).unwrap());
            let (e, g) = if gravity {
                let sol = estimate_gravity(&s.frame, &e, &ext(n), &mask, &noise).unwrap();
                (align_gravity_to_z(&e, &sol).0, Some(Vector3::z()))
            } else {
                (e, None)
            };
            let v = determine_chirality(&s.frame, &e, g.as_ref(), &ext(n), &mask, &noise);
            let chosen = match v.chosen {
                Chirality::Original => e.clone(),
                Chirality::Mirrored => mirror(&e),
                Chirality::Undetermined => return Err(TestCaseError::fail("undetermined")),
            };
            // the chosen embedding must be a proper rotation of the truth
            let t = uf_transform(&s.positions, &chosen);
            prop_assert!(t.determinant() > 0.0);
        }

        #[test]
        fn noiseless_end_to_end(seed in 0u64..1_000_000, n in 3usize..9, reference in 0usize..3, gravity in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scene(&mut rng, n, gravity);
            prop_assume!(n == 3 || planarity(&s.positions) > 0.01);
            let noise = NoiseConfig::benchmark().with_gravity(gravity);
            let run = run_sfc(&s.frame, n, &ext(n), &noise, RobotId(reference as u32), 0.95);
            match &run.result {
                Ok(res) => check_exact(&s, res, reference),
                // a weak coplanarity vote is a legitimate refusal
                Err(e) => prop_assert_eq!(e, &Error::ChiralityUndetermined),
            }
        }
    }
}
