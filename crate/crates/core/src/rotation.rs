//! Rotation algebra on SO(3): exponential/logarithm maps, Jacobians and
//! validated matrix wrappers.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Quat = UnitQuaternion<f64>;

/// Resolve the double cover so that `w >= 0`.
pub fn canonical(q: Quat) -> Quat {
    if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rotation vector (angle times axis) to unit quaternion.
pub fn quat_exp(v: &Vector3<f64>) -> Quat {
    let theta = v.norm();
    let q = if theta < 1e-8 {
        Quaternion::new(1.0 - theta * theta / 8.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z)
    } else {
        let s = (0.5 * theta).sin() / theta;
        Quaternion::new((0.5 * theta).cos(), s * v.x, s * v.y, s * v.z)
    };
    canonical(UnitQuaternion::new_normalize(q))
}

/// Unit quaternion to rotation vector with angle in `[0, pi]`.
pub fn quat_log(q: &Quat) -> Vector3<f64> {
    let q = canonical(*q);
    let v = q.imag();
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / q.w);
    }
    let theta = 2.0 * n.atan2(q.w);
    v * (theta / n)
}

pub fn rot_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

pub fn rot_log(r: &Matrix3<f64>) -> Vector3<f64> {
    quat_log(&quat_from_matrix(r))
}

pub fn quat_from_matrix(r: &Matrix3<f64>) -> Quat {
    canonical(UnitQuaternion::from_rotation_matrix(
        &Rotation3::from_matrix_unchecked(*r),
    ))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the left Jacobian of SO(3).
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian_inv(&(-phi))
}

pub fn rot_z(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation by `angle` about `axis` applied to `v` (axis need not be unit).
pub fn rotate_about(v: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    rot_exp(&(axis.normalize() * angle)) * v
}

fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

/// Proper rotation, `R^T R = I` and `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite())
            || orthonormality_error(&m) > 1e-9
            || (m.determinant() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidInput("matrix is not a proper rotation".into()));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_quat(q: &Quat) -> Self {
        Self(q.to_rotation_matrix().into_inner())
    }

    pub fn to_quat(&self) -> Quat {
        quat_from_matrix(&self.0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Orthogonal matrix that may include a reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalMatrix(Matrix3<f64>);

impl OrthogonalMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) || orthonormality_error(&m) > 1e-9 {
            return Err(Error::InvalidInput("matrix is not orthogonal".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// +1 for a rotation, -1 for a reflection.
    pub fn det(&self) -> f64 {
        self.0.determinant().signum()
    }
}
