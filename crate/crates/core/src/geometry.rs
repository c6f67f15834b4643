//! Rigid transforms and the pinhole camera with two-term radial distortion.
//!
//! Poses follow the "frame A to frame B" convention: a transform named
//! `b_from_a` maps coordinates expressed in A into B, `p_b = R p_a + t`.
//! Camera poses map the first camera frame into camera `i`, LiDAR poses map
//! the first LiDAR frame into LiDAR frame `i`, and the extrinsic maps the
//! camera frame into the LiDAR frame.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, SMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("undistortion did not converge at pixel ({u}, {v})")]
    UndistortDivergence { u: f64, v: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation by the axis-angle vector `w` (radians).
pub fn exp_so3(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*w)
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let raw = q.into_inner();
    // leaving near-unit input alone makes this idempotent, so poses survive
    // a save/load cycle bit-exactly
    let mut q = if (raw.norm_squared() - 1.0).abs() <= 1e-14 {
        UnitQuaternion::new_unchecked(raw)
    } else {
        UnitQuaternion::new_normalize(raw)
    };
    // canonical hemisphere keeps serialized output stable
    if q.w < 0.0 {
        q = UnitQuaternion::new_unchecked(-q.into_inner());
    }
    q
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(exp_so3(&axis_angle), translation)
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`; the quaternion is normalized.
    pub fn from_array(a: &[f64; 7]) -> Self {
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        Self::new(UnitQuaternion::new_unchecked(q), Vector3::new(a[4], a[5], a[6]))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3 {
        let inv = self.rotation.inverse();
        Se3::new(inv, -(inv * self.translation))
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left-multiplicative update: `R <- exp(dw) R`, `t <- t + dt`.
    pub fn retract(&self, dw: &Vector3<f64>, dt: &Vector3<f64>) -> Se3 {
        Se3::new(exp_so3(dw) * self.rotation, self.translation + dt)
    }

    /// Same transform with translation multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Se3 {
        Se3 {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }
}

impl Serialize for Se3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Se3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Ok(Se3::from_array(&a))
    }
}

/// Angle in degrees of the relative rotation `a⁻¹ b`, in `[0, 180]`.
///
/// Equal to `acos((tr(Ra Rbᵀ) - 1) / 2)` but evaluated through the
/// quaternion half-angle, which stays accurate for tiny angles.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    let s = q.imag().norm();
    let angle = 2.0 * s.atan2(q.w.abs());
    angle.to_degrees().clamp(0.0, 180.0)
}

/// Number of intrinsic parameters in the packed order
/// `[fx, fy, cx, cy, k1, k2]`.
pub const INTRINSICS_DIM: usize = 6;

/// Pinhole camera with radial distortion `1 + k1 r² + k2 r⁴`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub width: u32,
    pub height: u32,
}

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_TOL: f64 = 1e-12;

impl CameraIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k1: f64,
        k2: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let d = Self {
            fx,
            fy,
            cx,
            cy,
            k1,
            k2,
            width,
            height,
        };
        d.validate()?;
        Ok(d)
    }

    /// Checks focal/principal-point ranges and that the distortion factor
    /// stays positive on a grid over the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let p = self.to_params();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(self.cx > 0.0 && self.cx < w && self.cy > 0.0 && self.cy < h) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        const N: usize = 16;
        for i in 0..=N {
            for j in 0..=N {
                let u = w * i as f64 / N as f64;
                let v = h * j as f64 / N as f64;
                let x = (u - self.cx) / self.fx;
                let y = (v - self.cy) / self.fy;
                if self.distortion_factor(x * x + y * y) <= 0.0 {
                    return Err(GeometryError::InvalidIntrinsics(format!(
                        "distortion factor non-positive near pixel ({u}, {v})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_params(&self) -> [f64; INTRINSICS_DIM] {
        [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2]
    }

    /// Replaces the packed parameters without validation.
    pub fn with_params(&self, p: &[f64]) -> Self {
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            width: self.width,
            height: self.height,
        }
    }

    #[inline]
    pub fn distortion_factor(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { depth: p.z });
        }
        let x = p.x / p.z;
        let y = p.y / p.z;
        let d = self.distortion_factor(x * x + y * y);
        Ok(Vector2::new(self.fx * x * d + self.cx, self.fy * y * d + self.cy))
    }

    /// Projection plus Jacobians with respect to the point and to the packed
    /// intrinsics.
    pub fn project_with_jacobians(
        &self,
        p: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>, SMatrix<f64, 2, INTRINSICS_DIM>), GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { depth: p.z });
        }
        let iz = 1.0 / p.z;
        let x = p.x * iz;
        let y = p.y * iz;
        let r2 = x * x + y * y;
        let d = self.distortion_factor(r2);
        let dd_dr2 = self.k1 + 2.0 * self.k2 * r2;
        let xd = x * d;
        let yd = y * d;
        let pixel = Vector2::new(self.fx * xd + self.cx, self.fy * yd + self.cy);

        // d(xd, yd)/d(x, y)
        let dist_jac = Matrix2::new(
            d + 2.0 * x * x * dd_dr2,
            2.0 * x * y * dd_dr2,
            2.0 * x * y * dd_dr2,
            d + 2.0 * y * y * dd_dr2,
        );
        let norm_jac = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let focal = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        let j_point = focal * dist_jac * norm_jac;

        let mut j_intr = SMatrix::<f64, 2, INTRINSICS_DIM>::zeros();
        j_intr[(0, 0)] = xd;
        j_intr[(1, 1)] = yd;
        j_intr[(0, 2)] = 1.0;
        j_intr[(1, 3)] = 1.0;
        j_intr[(0, 4)] = self.fx * x * r2;
        j_intr[(1, 4)] = self.fy * y * r2;
        j_intr[(0, 5)] = self.fx * x * r2 * r2;
        j_intr[(1, 5)] = self.fy * y * r2 * r2;
        Ok((pixel, j_point, j_intr))
    }

    /// Undistorted normalized coordinates of a pixel via damped Newton.
    pub fn undistort_normalized(&self, pixel: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        let target = Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy);
        let residual = |q: &Vector2<f64>| q * self.distortion_factor(q.norm_squared()) - target;
        let mut q = target;
        let mut r = residual(&q);
        for _ in 0..UNDISTORT_MAX_ITERS {
            if r.amax() <= UNDISTORT_TOL {
                return Ok(q);
            }
            let r2 = q.norm_squared();
            let d = self.distortion_factor(r2);
            let dd = self.k1 + 2.0 * self.k2 * r2;
            let jac = Matrix2::new(
                d + 2.0 * q.x * q.x * dd,
                2.0 * q.x * q.y * dd,
                2.0 * q.x * q.y * dd,
                d + 2.0 * q.y * q.y * dd,
            );
            let Some(step) = jac.lu().solve(&(-r)) else {
                break;
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = q + step * t;
                let rc = residual(&cand);
                if rc.norm() < r.norm() || rc.amax() <= UNDISTORT_TOL {
                    q = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r.amax() <= UNDISTORT_TOL {
            Ok(q)
        } else {
            Err(GeometryError::UndistortDivergence { u: pixel.x, v: pixel.y })
        }
    }

    /// Unit bearing (z > 0) whose projection is `pixel`.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        let q = self.undistort_normalized(pixel)?;
        Ok(Vector3::new(q.x, q.y, 1.0).normalize())
    }
}
