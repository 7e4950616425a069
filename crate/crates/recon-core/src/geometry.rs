//! Homogeneous point algebra, pinhole intrinsics, rigid camera poses and
//! projection.
//!
//! Pixel convention: the origin is the top-left corner of the top-left
//! pixel, x grows rightward and y downward, so the centre of pixel `(i, j)`
//! sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Divisors smaller than this are treated as zero.
pub const HOMOGENEOUS_EPS: f64 = 1e-12;

/// Tolerance on `RᵀR = I` and `det R = 1` for poses.
pub const ROTATION_EPS: f64 = 1e-9;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at infinity (last homogeneous component {0:e})")]
    PointAtInfinity(f64),
    #[error("all homogeneous components are zero")]
    ZeroHomogeneous,
    #[error("point is behind the camera (depth {0:e})")]
    BehindCamera(f64),
    #[error("matrix is not a proper rotation (orthogonality error {orth:e}, det {det})")]
    InvalidRotation { orth: f64, det: f64 },
    #[error("resolution must be positive")]
    InvalidResolution,
    #[error("focal length must be positive, got {0}")]
    InvalidFocal(f64),
}

/// Homogeneous world point `(X, Y, Z, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomPoint3(pub Vector4<f64>);

/// Homogeneous image point `(x, y, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomPoint2(pub Vector3<f64>);

impl HomPoint3 {
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self, GeometryError> {
        let v = Vector4::new(x, y, z, w);
        if v.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroHomogeneous);
        }
        Ok(Self(v))
    }

    /// Lifts an inhomogeneous point with `W = 1`.
    pub fn from_point(p: &Vector3<f64>) -> Self {
        Self(Vector4::new(p.x, p.y, p.z, 1.0))
    }

    pub fn dehomogenize(&self) -> Result<Vector3<f64>, GeometryError> {
        let w = self.0.w;
        if w.abs() < HOMOGENEOUS_EPS {
            return Err(GeometryError::PointAtInfinity(w));
        }
        Ok(Vector3::new(self.0.x / w, self.0.y / w, self.0.z / w))
    }
}

impl HomPoint2 {
    pub fn new(x: f64, y: f64, w: f64) -> Result<Self, GeometryError> {
        let v = Vector3::new(x, y, w);
        if v.iter().all(|c| *c == 0.0) {
            return Err(GeometryError::ZeroHomogeneous);
        }
        Ok(Self(v))
    }

    pub fn from_pixel(p: &Vector2<f64>) -> Self {
        Self(Vector3::new(p.x, p.y, 1.0))
    }

    pub fn dehomogenize(&self) -> Result<Vector2<f64>, GeometryError> {
        let w = self.0.z;
        if w.abs() < HOMOGENEOUS_EPS {
            return Err(GeometryError::PointAtInfinity(w));
        }
        Ok(Vector2::new(self.0.x / w, self.0.y / w))
    }
}

/// Pinhole intrinsics with square pixels and zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Product of focal length and pixel density, in pixels.
    pub focal_px: f64,
    /// Principal point in pixels.
    pub principal_px: (f64, f64),
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(focal_px: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(focal_px > 0.0) || !focal_px.is_finite() {
            return Err(GeometryError::InvalidFocal(focal_px));
        }
        Ok(Self {
            focal_px,
            principal_px: (cx, cy),
            skew: 0.0,
        })
    }

    /// Intrinsics for a square `resolution × resolution` sensor: focal length
    /// of half the resolution (a 90° field of view) and the principal point
    /// at the image centre.
    pub fn from_resolution(resolution_px: u32) -> Result<Self, GeometryError> {
        if resolution_px == 0 {
            return Err(GeometryError::InvalidResolution);
        }
        let half = resolution_px as f64 / 2.0;
        Self::new(half, half, half)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (cx, cy) = self.principal_px;
        Matrix3::new(
            self.focal_px,
            self.skew,
            cx,
            0.0,
            self.focal_px,
            cy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (cx, cy) = self.principal_px;
        let f = self.focal_px;
        Matrix3::new(1.0 / f, 0.0, -cx / f, 0.0, 1.0 / f, -cy / f, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point. Returns `None` for non-positive depth.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        let inv_z = 1.0 / p.z;
        Some(Vector2::new(
            self.focal_px * p.x * inv_z + self.principal_px.0,
            self.focal_px * p.y * inv_z + self.principal_px.1,
        ))
    }

    /// Unit-depth ray `(x, y, 1)` through a pixel position.
    #[inline]
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.principal_px.0) / self.focal_px,
            (px.y - self.principal_px.1) / self.focal_px,
            1.0,
        )
    }
}

/// Rigid world-to-camera transform `x_cam = R·x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if orth > ROTATION_EPS || (det - 1.0).abs() > ROTATION_EPS || !orth.is_finite() {
        return Err(GeometryError::InvalidRotation { orth, det });
    }
    Ok(())
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera centred at `center` with orientation `rotation`
    /// (world-to-camera).
    pub fn from_center(rotation: Matrix3<f64>, center: &Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplicative update `R ← exp(ω)·R`, `t ← t + δt`.
    pub fn retract(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(omega) * self.rotation,
            translation: self.translation + dt,
        }
    }

    /// Rotation angle between two poses, radians.
    pub fn rotation_angle_to(&self, other: &CameraPose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    /// Re-orthonormalises the rotation (SVD projection) after many updates.
    pub fn normalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Angle of a rotation matrix in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos is badly conditioned near 0; use the skew part instead.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    s.atan2(c)
}

pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// 3×4 camera matrix `K·[R|t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn compose(k: &CameraIntrinsics, pose: &CameraPose) -> Result<Self, GeometryError> {
        check_rotation(&pose.rotation)?;
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        rt.set_column(3, &pose.translation);
        Ok(Self(k.matrix() * rt))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    /// Projects `X` to pixels. The sign of `W` is folded into the depth so
    /// that any positive or negative rescaling of `X` projects identically.
    pub fn project(&self, x: &HomPoint3) -> Result<Vector2<f64>, GeometryError> {
        let h = self.0 * x.0;
        let w = x.0.w;
        let depth = if w != 0.0 { h.z * w.signum() } else { h.z };
        if depth <= 0.0 {
            return Err(GeometryError::BehindCamera(depth));
        }
        HomPoint2(h).dehomogenize()
    }
}
