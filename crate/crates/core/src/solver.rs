//! Levenberg-Marquardt least squares over products of Euclidean,
//! unit-quaternion and unit-sphere parameter blocks.
//!
//! Factors report Jacobians against local perturbations: the ambient
//! coordinates for Euclidean blocks, a right-multiplied rotation vector for
//! quaternions (`q <- q * exp(d)`), and the ambient 3-vector for sphere blocks.
//! The solver maps sphere Jacobians onto a two-column tangent basis.

use nalgebra::{DMatrix, DVector, Matrix3x2, Quaternion, Vector2, Vector3};
use thiserror::Error;

use crate::rotation::{canonical, quat_exp, Quat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    Quaternion,
    UnitSphere,
}

impl Manifold {
    pub fn ambient_dim(self) -> usize {
        match self {
            Manifold::Euclidean(n) => n,
            Manifold::Quaternion => 4,
            Manifold::UnitSphere => 3,
        }
    }

    pub fn tangent_dim(self) -> usize {
        match self {
            Manifold::Euclidean(n) => n,
            Manifold::Quaternion => 3,
            Manifold::UnitSphere => 2,
        }
    }

    /// Column count of the Jacobian a factor returns for this block.
    pub fn local_dim(self) -> usize {
        match self {
            Manifold::Euclidean(n) => n,
            Manifold::Quaternion | Manifold::UnitSphere => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub kind: Manifold,
    pub values: Vec<f64>,
    pub frozen: bool,
}

impl ParameterBlock {
    pub fn euclidean(values: &[f64]) -> Self {
        ParameterBlock { kind: Manifold::Euclidean(values.len()), values: values.to_vec(), frozen: false }
    }

    /// Stored as `[w, x, y, z]`.
    pub fn quaternion(q: &Quat) -> Self {
        let q = canonical(*q);
        ParameterBlock { kind: Manifold::Quaternion, values: vec![q.w, q.i, q.j, q.k], frozen: false }
    }

    pub fn unit_sphere(v: &Vector3<f64>) -> Self {
        let v = v.normalize();
        ParameterBlock { kind: Manifold::UnitSphere, values: vec![v.x, v.y, v.z], frozen: false }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn quat(&self) -> Quat {
        quat_of(&self.values)
    }

    pub fn vec3(&self) -> Vector3<f64> {
        Vector3::new(self.values[0], self.values[1], self.values[2])
    }

    /// Move along the manifold by a tangent-space step.
    pub fn retract(&mut self, delta: &[f64]) {
        match self.kind {
            Manifold::Euclidean(_) => {
                for (v, d) in self.values.iter_mut().zip(delta) {
                    *v += d;
                }
            }
            Manifold::Quaternion => {
                let q = self.quat() * quat_exp(&Vector3::new(delta[0], delta[1], delta[2]));
                let q = canonical(Quat::new_normalize(q.into_inner()));
                self.values.copy_from_slice(&[q.w, q.i, q.j, q.k]);
            }
            Manifold::UnitSphere => {
                let x = self.vec3();
                let t = sphere_basis(&x) * Vector2::new(delta[0], delta[1]);
                let theta = t.norm();
                let y = if theta < 1e-300 {
                    x
                } else {
                    x * theta.cos() + t * (theta.sin() / theta)
                };
                let y = y.normalize();
                self.values.copy_from_slice(&[y.x, y.y, y.z]);
            }
        }
    }
}

pub fn quat_of(v: &[f64]) -> Quat {
    Quat::new_unchecked(Quaternion::new(v[0], v[1], v[2], v[3]))
}

pub fn vec3_of(v: &[f64]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Orthonormal basis of the tangent plane at unit vector `x`.
pub fn sphere_basis(x: &Vector3<f64>) -> Matrix3x2<f64> {
    let a = x.iamin();
    let mut e = Vector3::zeros();
    e[a] = 1.0;
    let b1 = (e - x * x.dot(&e)).normalize();
    let b2 = x.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

/// A residual function of one or more parameter blocks.
pub trait Factor: Send + Sync {
    fn dim(&self) -> usize;

    /// Residual at `params`; when `jacobians` is given, each entry has been
    /// sized `dim x local_dim` of the matching block and must be filled.
    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    None,
    Huber(f64),
}

impl Loss {
    /// `(rho(s), rho'(s))` for squared norm `s`.
    fn eval(self, s: f64) -> (f64, f64) {
        match self {
            Loss::None => (s, 1.0),
            Loss::Huber(d) => {
                if s <= d * d {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * d * r - d * d, d / r)
                }
            }
        }
    }
}

/// Square-root information applied to raw residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum Whitening {
    Identity,
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

pub struct ResidualBlock {
    pub factor: Box<dyn Factor>,
    pub blocks: Vec<usize>,
    pub whitening: Whitening,
    pub loss: Loss,
}

impl ResidualBlock {
    pub fn new(factor: impl Factor + 'static, blocks: Vec<usize>) -> Self {
        ResidualBlock { factor: Box::new(factor), blocks, whitening: Whitening::Identity, loss: Loss::None }
    }

    /// Isotropic noise with standard deviation `sigma`.
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.whitening = Whitening::Scalar(1.0 / sigma);
        self
    }

    pub fn with_sqrt_information(mut self, l: DMatrix<f64>) -> Self {
        self.whitening = Whitening::Matrix(l);
        self
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    fn whiten_vec(&self, r: DVector<f64>) -> DVector<f64> {
        match &self.whitening {
            Whitening::Identity => r,
            Whitening::Scalar(s) => r * *s,
            Whitening::Matrix(l) => l * r,
        }
    }

    fn whiten_mat(&self, j: DMatrix<f64>) -> DMatrix<f64> {
        match &self.whitening {
            Whitening::Identity => j,
            Whitening::Scalar(s) => j * *s,
            Whitening::Matrix(l) => l * j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("residual block {0} evaluated to a non-finite value")]
    NonFiniteResidual(usize),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iterations: 50, initial_lambda: 1e-4, function_tolerance: 1e-8, gradient_tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    MaxIter,
    TrustRegionCollapse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
}

/// Whitened, robustified linearization of one residual block.
pub struct Linearized {
    pub residual: DVector<f64>,
    /// Tangent-space Jacobian per bound block.
    pub jacobians: Vec<DMatrix<f64>>,
    pub cost: f64,
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

struct Layout {
    offsets: Vec<Option<usize>>,
    n: usize,
    first: Vec<usize>,
}

const MAX_LAMBDA: f64 = 1e16;

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, block: ParameterBlock) -> usize {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    pub fn add_residual(&mut self, r: ResidualBlock) -> usize {
        assert!(
            r.blocks.iter().all(|&b| b < self.blocks.len()),
            "residual binds a block that does not exist"
        );
        self.residuals.push(r);
        self.residuals.len() - 1
    }

    pub fn block(&self, i: usize) -> &ParameterBlock {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut ParameterBlock {
        &mut self.blocks[i]
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn residual(&self, k: usize) -> &ResidualBlock {
        &self.residuals[k]
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    fn params(&self, k: usize) -> Vec<&[f64]> {
        self.residuals[k].blocks.iter().map(|&b| self.blocks[b].values.as_slice()).collect()
    }

    fn residual_cost(&self, k: usize) -> Result<f64, SolverError> {
        let rb = &self.residuals[k];
        let r = rb.whiten_vec(rb.factor.evaluate(&self.params(k), None));
        let s = r.norm_squared();
        if !s.is_finite() {
            return Err(SolverError::NonFiniteResidual(k));
        }
        Ok(0.5 * rb.loss.eval(s).0)
    }

    /// Total cost `1/2 sum rho(|L r|^2)`.
    pub fn cost(&self) -> Result<f64, SolverError> {
        (0..self.residuals.len()).map(|k| self.residual_cost(k)).sum()
    }

    /// Whitened and robustified residual and tangent Jacobians of block `k`.
    pub fn linearize(&self, k: usize) -> Result<Linearized, SolverError> {
        let rb = &self.residuals[k];
        let m = rb.factor.dim();
        let mut jac: Vec<DMatrix<f64>> =
            rb.blocks.iter().map(|&b| DMatrix::zeros(m, self.blocks[b].kind.local_dim())).collect();
        let r = rb.factor.evaluate(&self.params(k), Some(&mut jac));
        if !r.iter().chain(jac.iter().flat_map(|j| j.iter())).all(|x| x.is_finite()) {
            return Err(SolverError::NonFiniteResidual(k));
        }
        let jac: Vec<DMatrix<f64>> = jac
            .into_iter()
            .zip(&rb.blocks)
            .map(|(j, &b)| {
                let j = to_tangent(&self.blocks[b], j);
                rb.whiten_mat(j)
            })
            .collect();
        let r = rb.whiten_vec(r);
        let (rho, drho) = rb.loss.eval(r.norm_squared());
        let w = drho.sqrt();
        Ok(Linearized {
            residual: if w == 1.0 { r } else { r * w },
            jacobians: if w == 1.0 { jac } else { jac.into_iter().map(|j| j * w).collect() },
            cost: 0.5 * rho,
        })
    }

    fn layout(&self) -> Layout {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut n = 0;
        for b in &self.blocks {
            if b.frozen {
                offsets.push(None);
            } else {
                offsets.push(Some(n));
                n += b.kind.tangent_dim();
            }
        }
        let mut first: Vec<usize> = (0..n).collect();
        for rb in &self.residuals {
            let lo = rb.blocks.iter().filter_map(|&b| offsets[b]).min();
            if let Some(lo) = lo {
                for &b in &rb.blocks {
                    if let Some(o) = offsets[b] {
                        for row in o..o + self.blocks[b].kind.tangent_dim() {
                            first[row] = first[row].min(lo);
                        }
                    }
                }
            }
        }
        Layout { offsets, n, first }
    }

    /// Dense normal equations `H = J^T J`, `g = J^T r` over the unfrozen
    /// tangent coordinates (blocks in insertion order).
    pub fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>, Vec<Option<usize>>), SolverError> {
        let layout = self.layout();
        let n = layout.n;
        let mut h = vec![0.0; n * n];
        let mut g = vec![0.0; n];
        self.assemble(&layout, &mut h, &mut g)?;
        let mut hm = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in layout.first[i]..=i {
                hm[(i, j)] = h[i * n + j];
                hm[(j, i)] = h[i * n + j];
            }
        }
        Ok((hm, DVector::from_vec(g), layout.offsets))
    }

    fn assemble(&self, layout: &Layout, h: &mut [f64], g: &mut [f64]) -> Result<f64, SolverError> {
        let n = layout.n;
        for i in 0..n {
            h[i * n + layout.first[i]..=i * n + i].iter_mut().for_each(|x| *x = 0.0);
        }
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut cost = 0.0;
        for k in 0..self.residuals.len() {
            let rb = &self.residuals[k];
            if rb.blocks.iter().all(|&b| layout.offsets[b].is_none()) {
                cost += self.residual_cost(k)?;
                continue;
            }
            let lin = self.linearize(k)?;
            cost += lin.cost;
            for (a, &ba) in rb.blocks.iter().enumerate() {
                let Some(oa) = layout.offsets[ba] else { continue };
                let ja = &lin.jacobians[a];
                let gb = ja.tr_mul(&lin.residual);
                for (i, v) in gb.iter().enumerate() {
                    g[oa + i] += v;
                }
                for (b, &bb) in rb.blocks.iter().enumerate() {
                    let Some(ob) = layout.offsets[bb] else { continue };
                    if ob > oa {
                        continue;
                    }
                    let jb = &lin.jacobians[b];
                    let blk = ja.tr_mul(jb);
                    for i in 0..blk.nrows() {
                        let row = &mut h[(oa + i) * n + ob..(oa + i) * n + ob + blk.ncols()];
                        for (j, x) in row.iter_mut().enumerate() {
                            *x += blk[(i, j)];
                        }
                    }
                }
            }
        }
        Ok(cost)
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.values.clone()).collect()
    }

    fn restore(&mut self, snap: &[Vec<f64>]) {
        for (b, s) in self.blocks.iter_mut().zip(snap) {
            b.values.copy_from_slice(s);
        }
    }

    fn apply_step(&mut self, layout: &Layout, delta: &[f64]) {
        for (b, off) in self.blocks.iter_mut().zip(&layout.offsets) {
            if let Some(o) = off {
                let d = b.kind.tangent_dim();
                b.retract(&delta[*o..*o + d]);
            }
        }
    }

    pub fn solve(&mut self, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
        let layout = self.layout();
        if layout.n == 0 {
            return Err(SolverError::InvalidProblem("no unfrozen parameter block".into()));
        }
        let n = layout.n;
        let mut cost = self.cost()?;
        let initial_cost = cost;
        let mut h = vec![0.0; n * n];
        let mut l = vec![0.0; n * n];
        let mut g = vec![0.0; n];
        let mut delta = vec![0.0; n];
        let mut lambda = opts.initial_lambda;
        let mut iterations = 0;
        let mut termination = Termination::MaxIter;
        let mut converged = false;

        'outer: while iterations < opts.max_iterations {
            // every pass through here follows an accepted step
            self.assemble(&layout, &mut h, &mut g)?;
            if g.iter().fold(0.0f64, |m, x| m.max(x.abs())) < opts.gradient_tolerance {
                termination = Termination::Tolerance;
                converged = true;
                break;
            }
            iterations += 1;
            loop {
                if lambda > MAX_LAMBDA {
                    termination = Termination::TrustRegionCollapse;
                    break 'outer;
                }
                let damping: Vec<f64> = (0..n).map(|i| lambda * h[i * n + i].clamp(1e-6, 1e32)).collect();
                if !envelope_cholesky(&h, &damping, &layout.first, n, &mut l) {
                    lambda *= 10.0;
                    continue;
                }
                for (d, gi) in delta.iter_mut().zip(&g) {
                    *d = -gi;
                }
                envelope_solve(&l, &layout.first, n, &mut delta);
                let snap = self.snapshot();
                self.apply_step(&layout, &delta);
                let new_cost = self.cost().unwrap_or(f64::INFINITY);
                if new_cost < cost {
                    let rel = (cost - new_cost) / cost;
                    cost = new_cost;
                    lambda /= 10.0;
                    if rel < opts.function_tolerance {
                        termination = Termination::Tolerance;
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                self.restore(&snap);
                lambda *= 10.0;
            }
        }
        Ok(SolveReport { iterations, initial_cost, final_cost: cost, converged, termination })
    }
}

fn to_tangent(block: &ParameterBlock, j: DMatrix<f64>) -> DMatrix<f64> {
    match block.kind {
        Manifold::UnitSphere => {
            let b = sphere_basis(&block.vec3());
            let bm = DMatrix::from_iterator(3, 2, b.iter().copied());
            j * bm
        }
        _ => j,
    }
}

/// Cholesky of `H + diag(damping)` restricted to the row envelope `first`.
/// `h` and `l` are row-major; only entries `first[i]..=i` of row `i` are used.
fn envelope_cholesky(h: &[f64], damping: &[f64], first: &[usize], n: usize, l: &mut [f64]) -> bool {
    for i in 0..n {
        let fi = first[i];
        for j in fi..=i {
            let fj = first[j].max(fi);
            let mut s = h[i * n + j];
            if i == j {
                s += damping[i];
            }
            let li = &l[i * n + fj..i * n + j];
            let lj = &l[j * n + fj..j * n + j];
            s -= li.iter().zip(lj).map(|(a, b)| a * b).sum::<f64>();
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

fn envelope_solve(l: &[f64], first: &[usize], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let fi = first[i];
        let s: f64 = l[i * n + fi..i * n + i].iter().zip(&x[fi..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        x[i] /= l[i * n + i];
        let xi = x[i];
        for k in first[i]..i {
            x[k] -= l[i * n + k] * xi;
        }
    }
}

/// Largest relative deviation between the analytic tangent-space Jacobian of
/// `residual` and central finite differences taken through the retraction.
pub fn check_jacobian(residual: &ResidualBlock, blocks: &[ParameterBlock], eps: f64) -> f64 {
    let m = residual.factor.dim();
    let bound: Vec<ParameterBlock> = residual.blocks.iter().map(|&b| blocks[b].clone()).collect();
    let eval = |bs: &[ParameterBlock]| {
        let p: Vec<&[f64]> = bs.iter().map(|b| b.values.as_slice()).collect();
        residual.factor.evaluate(&p, None)
    };
    let mut jac: Vec<DMatrix<f64>> = bound.iter().map(|b| DMatrix::zeros(m, b.kind.local_dim())).collect();
    {
        let p: Vec<&[f64]> = bound.iter().map(|b| b.values.as_slice()).collect();
        residual.factor.evaluate(&p, Some(&mut jac));
    }
    let mut worst = 0.0f64;
    for (bi, block) in bound.iter().enumerate() {
        let analytic = to_tangent(block, jac[bi].clone());
        let td = block.kind.tangent_dim();
        let mut numeric = DMatrix::zeros(m, td);
        for k in 0..td {
            let mut step = vec![0.0; td];
            step[k] = eps;
            let mut plus = bound.clone();
            plus[bi].retract(&step);
            step[k] = -eps;
            let mut minus = bound.clone();
            minus[bi].retract(&step);
            let col = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            numeric.set_column(k, &col);
        }
        let scale = numeric.amax().max(1e-6);
        worst = worst.max((analytic - numeric).amax() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::quat_log;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `r = A x - b`
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Factor for Linear {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = jac {
                j[0].copy_from(&self.a);
            }
            &self.a * DVector::from_column_slice(p[0]) - &self.b
        }
    }

    /// `r = Log(q^-1 * target)`
    struct QuatTarget(Quat);

    impl Factor for QuatTarget {
        fn dim(&self) -> usize {
            3
        }
        fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            let q = quat_of(p[0]);
            let r = quat_log(&(q.inverse() * self.0));
            if let Some(j) = jac {
                // q <- q exp(d): Log(exp(-d) E) ~ r - Jl^-1(r) d
                let m = -crate::rotation::left_jacobian_inv(&r);
                j[0].copy_from(&m);
            }
            DVector::from_column_slice(r.as_slice())
        }
    }

    /// `r = x - target` for a point on the sphere.
    struct SphereTarget(Vector3<f64>);

    impl Factor for SphereTarget {
        fn dim(&self) -> usize {
            3
        }
        fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = jac {
                j[0].fill_with_identity();
            }
            DVector::from_column_slice((vec3_of(p[0]) - self.0).as_slice())
        }
    }

    #[test]
    fn scalar_linear_problem() {
        let mut p = Problem::new();
        let x = p.add_block(ParameterBlock::euclidean(&[0.0]));
        p.add_residual(ResidualBlock::new(
            Linear { a: DMatrix::from_element(1, 1, 1.0), b: DVector::from_element(1, 3.0) },
            vec![x],
        ));
        let rep = p.solve(&SolverOptions::default()).unwrap();
        assert!((p.block(x).values[0] - 3.0).abs() < 1e-10);
        assert!(rep.converged);
        assert!(rep.final_cost <= rep.initial_cost);
    }

    #[test]
    fn quaternion_converges_to_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let target = quat_exp(&Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
            let start = quat_exp(&Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let mut p = Problem::new();
            let q = p.add_block(ParameterBlock::quaternion(&start));
            p.add_residual(ResidualBlock::new(QuatTarget(target), vec![q]));
            p.solve(&SolverOptions::default()).unwrap();
            let got = p.block(q).quat();
            assert!(got.angle_to(&target) < 1e-8);
            assert!((got.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_block_stays_unit_and_converges() {
        let target = Vector3::new(0.3, -0.5, 0.8).normalize();
        let mut p = Problem::new();
        let s = p.add_block(ParameterBlock::unit_sphere(&Vector3::new(-1.0, 0.2, 0.1)));
        p.add_residual(ResidualBlock::new(SphereTarget(target), vec![s]));
        p.solve(&SolverOptions::default()).unwrap();
        let v = p.block(s).vec3();
        assert!((v.norm() - 1.0).abs() < 1e-9);
        assert!((v - target).norm() < 1e-8);
    }

    #[test]
    fn huber_bounds_outlier_influence() {
        let clean = [0.1, 0.12, 0.08, 0.11, 0.09, 0.1, 0.1, 0.13, 0.07, 0.1];
        let solve = |data: &[f64], loss: Loss| {
            let mut p = Problem::new();
            let x = p.add_block(ParameterBlock::euclidean(&[0.0]));
            for &d in data {
                p.add_residual(
                    ResidualBlock::new(
                        Linear { a: DMatrix::from_element(1, 1, 1.0), b: DVector::from_element(1, d) },
                        vec![x],
                    )
                    .with_loss(loss),
                );
            }
            p.solve(&SolverOptions::default()).unwrap();
            p.block(x).values[0]
        };
        let clean_opt = solve(&clean, Loss::Huber(1.0));
        let mut dirty = clean.to_vec();
        dirty.push(100.0);
        let robust = solve(&dirty, Loss::Huber(1.0));
        let plain = solve(&dirty, Loss::None);
        assert!((robust - clean_opt).abs() < 0.2, "{robust} vs {clean_opt}");
        assert!((plain - clean_opt).abs() > 5.0);
    }

    #[test]
    fn frozen_blocks_are_not_moved() {
        let mut p = Problem::new();
        let x = p.add_block(ParameterBlock::euclidean(&[1.0]));
        let y = p.add_block(ParameterBlock::euclidean(&[5.0]).frozen(true));
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        p.add_residual(ResidualBlock::new(Linear { a: a.clone(), b: DVector::from_element(1, 2.0) }, vec![x]));
        p.add_residual(ResidualBlock::new(Linear { a: a.clone(), b: DVector::from_element(1, 5.0) }, vec![y]));
        p.add_residual(ResidualBlock::new(Linear { a, b: DVector::from_element(1, 1.0) }, vec![y]));
        p.solve(&SolverOptions::default()).unwrap();
        assert_eq!(p.block(y).values[0], 5.0);
        assert!((p.block(x).values[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_residual_names_block() {
        let mut p = Problem::new();
        let x = p.add_block(ParameterBlock::euclidean(&[0.0]));
        p.add_residual(ResidualBlock::new(
            Linear { a: DMatrix::from_element(1, 1, 1.0), b: DVector::from_element(1, 1.0) },
            vec![x],
        ));
        p.add_residual(ResidualBlock::new(
            Linear { a: DMatrix::from_element(1, 1, 1.0), b: DVector::from_element(1, f64::NAN) },
            vec![x],
        ));
        assert_eq!(p.solve(&SolverOptions::default()), Err(SolverError::NonFiniteResidual(1)));
    }

    #[test]
    fn rank_deficient_problem_returns_best_so_far() {
        // x + y = 2 leaves one direction free; damping keeps the step finite.
        let mut p = Problem::new();
        let x = p.add_block(ParameterBlock::euclidean(&[0.0, 0.0]));
        p.add_residual(ResidualBlock::new(
            Linear { a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), b: DVector::from_element(1, 2.0) },
            vec![x],
        ));
        let rep = p.solve(&SolverOptions::default()).unwrap();
        let v = &p.block(x).values;
        assert!((v[0] + v[1] - 2.0).abs() < 1e-8);
        assert!(rep.final_cost <= rep.initial_cost);
    }

    #[test]
    fn check_jacobian_on_linear_residual() {
        let blocks = vec![ParameterBlock::euclidean(&[0.3, -0.2])];
        let r = ResidualBlock::new(
            Linear { a: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]), b: DVector::from_element(2, 1.0) },
            vec![0],
        );
        assert!(check_jacobian(&r, &blocks, 1e-6) < 1e-9);
        let blocks = vec![ParameterBlock::quaternion(&quat_exp(&Vector3::new(0.2, 1.0, -0.4)))];
        let r = ResidualBlock::new(QuatTarget(quat_exp(&Vector3::new(-0.5, 0.1, 0.9))), vec![0]);
        assert!(check_jacobian(&r, &blocks, 1e-6) < 1e-6);
        let blocks = vec![ParameterBlock::unit_sphere(&Vector3::new(0.2, 1.0, -0.4))];
        let r = ResidualBlock::new(SphereTarget(Vector3::z()), vec![0]);
        assert!(check_jacobian(&r, &blocks, 1e-6) < 1e-6);
    }

    fn linear_problem(a: &DMatrix<f64>, b: &DVector<f64>) -> Problem {
        let mut p = Problem::new();
        let x = p.add_block(ParameterBlock::euclidean(&vec![0.0; a.ncols()]));
        p.add_residual(ResidualBlock::new(Linear { a: a.clone(), b: b.clone() }, vec![x]));
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linear_problems_reach_normal_equation_solution(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (8, 4);
            // random but well conditioned
            let a = DMatrix::from_fn(m, n, |i, j| rng.gen_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 });
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-5.0..5.0));
            let exact: DVector<f64> = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
            let scale: f64 = exact.amax().max(1.0);

            // A single damped iteration removes all but a sliver of the excess cost.
            let cost_at = |x: &DVector<f64>| 0.5 * (&a * x - &b).norm_squared();
            let c_star = cost_at(&exact);
            let c0 = cost_at(&DVector::zeros(n));
            let mut one = linear_problem(&a, &b);
            one.solve(&SolverOptions { max_iterations: 1, ..Default::default() }).unwrap();
            let x1 = DVector::from_column_slice(&one.block(0).values);
            prop_assert!(cost_at(&x1) - c_star <= 1e-4 * (c0 - c_star) + 1e-12);

            // Inconsistent system: cost-based acceptance resolves the optimum
            // only to about sqrt(machine eps) of the residual scale.
            let mut p = linear_problem(&a, &b);
            let rep = p.solve(&SolverOptions::default()).unwrap();
            let x = DVector::from_column_slice(&p.block(0).values);
            prop_assert!((x - &exact).amax() / scale < 1e-6);
            prop_assert!(rep.final_cost <= rep.initial_cost + 1e-12);

            // Consistent system: the damping decays geometrically to the exact solution.
            let truth = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let b = &a * &truth;
            let mut p = linear_problem(&a, &b);
            let rep = p.solve(&SolverOptions::default()).unwrap();
            let x = DVector::from_column_slice(&p.block(0).values);
            prop_assert!((x.clone() - &truth).amax() / truth.amax().max(1.0) < 1e-10, "{} {:?}", (x - &truth).amax(), rep);
            prop_assert!(rep.iterations <= 6, "{}", rep.iterations);
            prop_assert!(rep.converged);
            prop_assert!(rep.final_cost <= rep.initial_cost + 1e-12);
        }
    }

    #[test]
    fn envelope_factorization_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let first: Vec<usize> = (0..n).map(|i| if i < 3 { 0 } else { i - 3 }).collect();
        let mut h = vec![0.0; n * n];
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in first[i]..=i {
                let v = if i == j { 10.0 } else { rng.gen_range(-1.0..1.0) };
                h[i * n + j] = v;
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        let mut l = vec![0.0; n * n];
        assert!(envelope_cholesky(&h, &vec![0.0; n], &first, n, &mut l));
        let b = DVector::from_fn(n, |i, _| i as f64 - 4.0);
        let mut x = b.as_slice().to_vec();
        envelope_solve(&l, &first, n, &mut x);
        let expect = dense.cholesky().unwrap().solve(&b);
        assert_relative_eq!(DVector::from_vec(x), expect, epsilon = 1e-12);
    }
}
