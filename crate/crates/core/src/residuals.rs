//! Distance, bearing and gravity residuals with analytic Jacobians.
//!
//! Orientation Jacobians are taken against right perturbations
//! `R <- R exp(d)`, matching the solver's quaternion retraction.

use nalgebra::{DMatrix, DVector, Matrix1x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rotation::{skew, Quat};
use crate::solver::{quat_of, vec3_of, Factor};
use crate::types::{BearingMeasurement, DistanceMeasurement, Extrinsics, GravityMeasurement};

const MIN_BASELINE: f64 = 1e-6;

/// Poses of every robot at one instant in the reference frame, plus the
/// shared gravity direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStateView {
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Quat>,
    pub gravity: Vector3<f64>,
}

struct DistanceLin {
    r: f64,
    j: Option<[Matrix1x3<f64>; 4]>,
}

fn distance_lin(
    z: f64,
    p_i: &Vector3<f64>,
    r_i: &Matrix3<f64>,
    u_i: &Vector3<f64>,
    p_j: &Vector3<f64>,
    r_j: &Matrix3<f64>,
    u_j: &Vector3<f64>,
) -> DistanceLin {
    let d = p_j + r_j * u_j - p_i - r_i * u_i;
    let len = d.norm();
    let r = len - z;
    if len < MIN_BASELINE {
        return DistanceLin { r, j: None };
    }
    let n = (d / len).transpose();
    DistanceLin { r, j: Some([-n, n * r_i * skew(u_i), n, -n * r_j * skew(u_j)]) }
}

struct BearingLin {
    r: Vector3<f64>,
    j: Option<[Matrix3<f64>; 4]>,
}

#[allow(clippy::too_many_arguments)]
fn bearing_lin(
    z: &Vector3<f64>,
    r_cam: &Matrix3<f64>,
    c_i: &Vector3<f64>,
    p_i: &Vector3<f64>,
    r_i: &Matrix3<f64>,
    m_j: &Vector3<f64>,
    p_j: &Vector3<f64>,
    r_j: &Matrix3<f64>,
) -> BearingLin {
    let d = p_j + r_j * m_j - p_i - r_i * c_i;
    let len = d.norm();
    if len < MIN_BASELINE {
        return BearingLin { r: -z, j: None };
    }
    let u = d / len;
    let ct = r_cam.transpose() * r_i.transpose();
    let r = ct * u - z;
    let proj = (Matrix3::identity() - u * u.transpose()) / len;
    let cp = ct * proj;
    let j_ti = cp * r_i * skew(c_i) + r_cam.transpose() * skew(&(r_i.transpose() * u));
    BearingLin { r, j: Some([-cp, j_ti, cp, -cp * r_j * skew(m_j)]) }
}

fn view_pose(view: &FrameStateView, k: usize) -> (Vector3<f64>, Matrix3<f64>) {
    (view.positions[k], view.orientations[k].to_rotation_matrix().into_inner())
}

/// `|p_{D_i -> D_j}| - z_d` with UWB lever arms rotated by each robot's attitude.
pub fn distance_residual(meas: &DistanceMeasurement, view: &FrameStateView, ext: &[Extrinsics]) -> f64 {
    let (i, j) = (meas.from.index(), meas.to.index());
    let (p_i, r_i) = view_pose(view, i);
    let (p_j, r_j) = view_pose(view, j);
    distance_lin(meas.range, &p_i, &r_i, &ext[i].uwb_position, &p_j, &r_j, &ext[j].uwb_position).r
}

/// Jacobians of [`distance_residual`] against `(p_from, theta_from, p_to, theta_to)`.
pub fn distance_jacobians(
    meas: &DistanceMeasurement,
    view: &FrameStateView,
    ext: &[Extrinsics],
) -> Result<[Matrix1x3<f64>; 4]> {
    let (i, j) = (meas.from.index(), meas.to.index());
    let (p_i, r_i) = view_pose(view, i);
    let (p_j, r_j) = view_pose(view, j);
    distance_lin(meas.range, &p_i, &r_i, &ext[i].uwb_position, &p_j, &r_j, &ext[j].uwb_position)
        .j
        .ok_or_else(|| Error::DegenerateGeometry("UWB antennas coincide".into()))
}

/// Predicted camera-frame direction to the target marker minus the measurement.
pub fn bearing_residual(meas: &BearingMeasurement, view: &FrameStateView, ext: &[Extrinsics]) -> Vector3<f64> {
    bearing_eval(meas, view, ext).r
}

/// Jacobians of [`bearing_residual`] against `(p_obs, theta_obs, p_tgt, theta_tgt)`.
pub fn bearing_jacobians(
    meas: &BearingMeasurement,
    view: &FrameStateView,
    ext: &[Extrinsics],
) -> Result<[Matrix3<f64>; 4]> {
    bearing_eval(meas, view, ext)
        .j
        .ok_or_else(|| Error::DegenerateGeometry("camera and marker coincide".into()))
}

fn bearing_eval(meas: &BearingMeasurement, view: &FrameStateView, ext: &[Extrinsics]) -> BearingLin {
    let (i, j) = (meas.observer.index(), meas.target.index());
    let (p_i, r_i) = view_pose(view, i);
    let (p_j, r_j) = view_pose(view, j);
    bearing_lin(
        &meas.direction,
        ext[i].cam_rotation.matrix(),
        &ext[i].cam_position,
        &p_i,
        &r_i,
        &ext[j].marker_position,
        &p_j,
        &r_j,
    )
}

/// `R_i^T g - z_g`.
pub fn gravity_residual(meas: &GravityMeasurement, view: &FrameStateView) -> Vector3<f64> {
    let (_, r_i) = view_pose(view, meas.robot.index());
    r_i.transpose() * view.gravity - meas.direction
}

/// Solver factor over `[p_from, q_from, p_to, q_to]`.
#[derive(Debug, Clone)]
pub struct DistanceFactor {
    pub range: f64,
    pub lever_from: Vector3<f64>,
    pub lever_to: Vector3<f64>,
}

impl DistanceFactor {
    pub fn new(meas: &DistanceMeasurement, ext: &[Extrinsics]) -> Self {
        DistanceFactor {
            range: meas.range,
            lever_from: ext[meas.from.index()].uwb_position,
            lever_to: ext[meas.to.index()].uwb_position,
        }
    }
}

impl Factor for DistanceFactor {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let r_i = quat_of(p[1]).to_rotation_matrix().into_inner();
        let r_j = quat_of(p[3]).to_rotation_matrix().into_inner();
        let lin = distance_lin(self.range, &vec3_of(p[0]), &r_i, &self.lever_from, &vec3_of(p[2]), &r_j, &self.lever_to);
        if let Some(out) = jac {
            match lin.j {
                Some(js) => {
                    for (o, j) in out.iter_mut().zip(js.iter()) {
                        o.copy_from(j);
                    }
                }
                None => out.iter_mut().for_each(|o| o.fill(0.0)),
            }
        }
        DVector::from_element(1, lin.r)
    }
}

/// Solver factor over `[p_obs, q_obs, p_tgt, q_tgt]`.
#[derive(Debug, Clone)]
pub struct BearingFactor {
    pub direction: Vector3<f64>,
    pub cam_rotation: Matrix3<f64>,
    pub cam_position: Vector3<f64>,
    pub marker_position: Vector3<f64>,
}

impl BearingFactor {
    pub fn new(meas: &BearingMeasurement, ext: &[Extrinsics]) -> Self {
        let e = &ext[meas.observer.index()];
        BearingFactor {
            direction: meas.direction,
            cam_rotation: *e.cam_rotation.matrix(),
            cam_position: e.cam_position,
            marker_position: ext[meas.target.index()].marker_position,
        }
    }
}

impl Factor for BearingFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let r_i = quat_of(p[1]).to_rotation_matrix().into_inner();
        let r_j = quat_of(p[3]).to_rotation_matrix().into_inner();
        let lin = bearing_lin(
            &self.direction,
            &self.cam_rotation,
            &self.cam_position,
            &vec3_of(p[0]),
            &r_i,
            &self.marker_position,
            &vec3_of(p[2]),
            &r_j,
        );
        if let Some(out) = jac {
            match lin.j {
                Some(js) => {
                    for (o, j) in out.iter_mut().zip(js.iter()) {
                        o.copy_from(j);
                    }
                }
                None => out.iter_mut().for_each(|o| o.fill(0.0)),
            }
        }
        DVector::from_column_slice(lin.r.as_slice())
    }
}

/// Solver factor over `[q_robot, g]` with `g` on the unit sphere.
#[derive(Debug, Clone)]
pub struct GravityFactor {
    pub direction: Vector3<f64>,
}

impl Factor for GravityFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, p: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let r_i = quat_of(p[0]).to_rotation_matrix().into_inner();
        let g = vec3_of(p[1]);
        let body = r_i.transpose() * g;
        if let Some(out) = jac {
            out[0].copy_from(&skew(&body));
            out[1].copy_from(&r_i.transpose());
        }
        DVector::from_column_slice((body - self.direction).as_slice())
    }
}
