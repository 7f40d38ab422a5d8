//! Rotation and rigid-motion primitives shared by every other module.
//!
//! Conventions:
//! - Poses are camera-to-world: `x_world = R * x_cam + t`.
//! - Camera frame axes are +x right, +y down, +z forward.
//! - Quaternions are stored as `(w, x, y, z)` and kept on the `w >= 0`
//!   hemisphere so that `q` and `-q` never both appear.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating that a matrix is a proper rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Below this angle slerp falls back to normalized linear interpolation.
const SLERP_LINEAR_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Pinhole intrinsics with `fx = fy = width` and a centered principal point.
    pub fn centered(width: u32, height: u32) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("intrinsics", "focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) || !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(
                "intrinsics",
                format!(
                    "principal point ({}, {}) outside image {}x{}",
                    self.cx, self.cy, self.width, self.height
                ),
            ));
        }
        Ok(())
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::centered(512, 512)
    }
}

/// Unit quaternion on the `w >= 0` hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and sign-canonicalizes arbitrary components. Inputs that
    /// are already unit to within a few ulps are kept bit-for-bit so stored
    /// quaternions read back unchanged.
    pub fn from_components(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite("quaternion"));
        }
        if n < 1e-12 {
            return Err(Error::invalid("quaternion", "zero-norm quaternion"));
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self::canonical(w, x, y, z));
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Self { w: -w, x: -x, y: -y, z: -z }
        } else {
            Self { w, x, y, z }
        }
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n.is_finite() && angle.is_finite()) {
            return Err(Error::NonFinite("axis-angle"));
        }
        if n < 1e-300 {
            return Ok(Self::IDENTITY);
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Ok(Self::renormalized(c, a.x * s, a.y * s, a.z * s))
    }

    /// Exponential map from a rotation vector (axis * angle).
    pub fn exp(rotvec: &Vec3) -> Self {
        let theta = rotvec.norm();
        if theta < 1e-12 {
            // Second-order series keeps the small-angle case exact to rounding.
            let half = rotvec * 0.5;
            return Self::renormalized(1.0 - theta * theta / 8.0, half.x, half.y, half.z);
        }
        let (s, c) = (theta / 2.0).sin_cos();
        let a = rotvec * (s / theta);
        Self::renormalized(c, a.x, a.y, a.z)
    }

    /// Logarithm map to a rotation vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let v = self.vector();
        let vn = v.norm();
        if vn < 1e-12 {
            return v * (2.0 / self.w);
        }
        let angle = 2.0 * vn.atan2(self.w);
        v * (angle / vn)
    }

    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn dot(&self, rhs: &Self) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Converts a rotation matrix, rejecting matrices that are not
    /// orthonormal with determinant +1 within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
        let det = (m.determinant() - 1.0).abs();
        let deviation = ortho.max(det);
        if deviation > ROTATION_TOLERANCE {
            return Err(Error::NotARotation { deviation, tolerance: ROTATION_TOLERANCE });
        }
        Ok(Self::from_matrix_unchecked(m))
    }

    // Shepperd's method: pivot on the largest diagonal combination.
    fn from_matrix_unchecked(m: &Mat3) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::renormalized(w, x, y, z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q0: &UnitQuaternion, q1: &UnitQuaternion, u: f64) -> UnitQuaternion {
    let u = u.clamp(0.0, 1.0);
    let mut dot = q0.dot(q1);
    let mut b = q1.to_array();
    if dot < 0.0 {
        dot = -dot;
        b.iter_mut().for_each(|c| *c = -*c);
    }
    let a = q0.to_array();
    let theta = dot.min(1.0).acos();
    let (ka, kb) = if theta < SLERP_LINEAR_THRESHOLD {
        (1.0 - u, u)
    } else {
        let s = theta.sin();
        (((1.0 - u) * theta).sin() / s, (u * theta).sin() / s)
    };
    UnitQuaternion::renormalized(
        ka * a[0] + kb * b[0],
        ka * a[1] + kb * b[1],
        ka * a[2] + kb * b[2],
        ka * a[3] + kb * b[3],
    )
}

/// Angle of the relative rotation between `q0` and `q1`, in `[0, pi]`.
pub fn geodesic_angle(q0: &UnitQuaternion, q1: &UnitQuaternion) -> f64 {
    let rel = q0.conjugate().mul(q1);
    rel.angle().clamp(0.0, PI)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation.
    pub rotation: UnitQuaternion,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: UnitQuaternion, translation: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        intrinsics.validate()?;
        Ok(Self { rotation, translation, intrinsics })
    }

    pub fn identity(intrinsics: Intrinsics) -> Self {
        Self { rotation: UnitQuaternion::IDENTITY, translation: Vec3::zeros(), intrinsics }
    }

    /// Applies a relative motion expressed in this pose's frame.
    pub fn compose(&self, rel: &RigidTransform) -> CameraPose {
        CameraPose {
            rotation: self.rotation.mul(&rel.rotation),
            translation: self.translation + self.rotation.rotate(&rel.translation),
            intrinsics: self.intrinsics,
        }
    }
}

/// A rotation plus translation, used both for relative poses and for
/// global rigid transforms of whole trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { rotation: UnitQuaternion::IDENTITY, translation: Vec3::new(0.0, 0.0, 0.0) };

    /// Left-multiplies a pose: the pose is re-expressed in a new world frame.
    pub fn apply(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation.mul(&pose.rotation),
            translation: self.rotation.rotate(&pose.translation) + self.translation,
            intrinsics: pose.intrinsics,
        }
    }

    pub fn apply_trajectory(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            poses: traj.poses.iter().map(|p| self.apply(p)).collect(),
            fps: traj.fps,
        }
    }
}

/// Pose of `b` expressed in the frame of `a`.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> RigidTransform {
    let inv = a.rotation.conjugate();
    RigidTransform {
        rotation: inv.mul(&b.rotation),
        translation: inv.rotate(&(b.translation - a.translation)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<CameraPose>,
    fps: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<CameraPose>, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid("trajectory", format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = poses.first() {
            let (w, h) = (first.intrinsics.width, first.intrinsics.height);
            if let Some(i) = poses.iter().position(|p| p.intrinsics.width != w || p.intrinsics.height != h) {
                return Err(Error::invalid(
                    "trajectory",
                    format!("pose {i} has image size differing from {w}x{h}"),
                ));
            }
        }
        Ok(Self { poses, fps })
    }

    /// Trajectory at the default rate of one frame per second.
    pub fn from_poses(poses: Vec<CameraPose>) -> Result<Self> {
        Self::new(poses, 1.0)
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn into_poses(self) -> Vec<CameraPose> {
        self.poses
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    pub fn require_len(&self, required: usize) -> Result<()> {
        if self.poses.len() < required {
            return Err(Error::TooFewPoses { required, actual: self.poses.len() });
        }
        Ok(())
    }
}

/// Per-frame egocentric velocities between consecutive poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    /// Linear velocity in the camera frame of the earlier pose (units/s).
    pub linear: Vec<Vec3>,
    /// Angular rate about the camera axes (rad/s): x is pitch, y is yaw,
    /// z is roll. Positive pitch tilts the view up, positive yaw turns it
    /// right and positive roll turns the top of the image to the right.
    pub angular: Vec<Vec3>,
}

impl Kinematics {
    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.linear.iter().map(|v| v.norm()).collect()
    }
}

pub fn kinematics(traj: &Trajectory) -> Result<Kinematics> {
    traj.require_len(2)?;
    let fps = traj.fps();
    let (linear, angular) = traj
        .poses()
        .windows(2)
        .map(|w| {
            let rel = relative_pose(&w[0], &w[1]);
            (rel.translation * fps, rel.rotation.log() * fps)
        })
        .unzip();
    Ok(Kinematics { linear, angular })
}
