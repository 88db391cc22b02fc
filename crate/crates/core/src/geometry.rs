//! Pinhole camera model, rigid poses and camera-induced optical flow.
//!
//! Poses are stored body-to-world throughout the crate; quaternions only
//! appear at trajectory-file boundaries. All operations here are pure
//! value-to-value functions.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for rotation-matrix orthonormality checks.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cannot project landmark with non-positive depth {0}")]
    DegenerateProjection(f64),
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("matrix is not a proper rotation (orthonormality residual {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// True when the (subpixel) point lies inside the image rectangle.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.u < self.width as f64 && p.v >= 0.0 && p.v < self.height as f64
    }
}

/// Subpixel image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: PixelPoint) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// Frame a landmark's coordinates are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkFrame {
    CameraBody,
    World,
}

/// A 3-D point tagged with its reference frame. In the camera body frame
/// the third coordinate is the depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub frame: LandmarkFrame,
}

impl Landmark {
    pub fn in_camera(position: Vector3<f64>) -> Self {
        Self { position, frame: LandmarkFrame::CameraBody }
    }

    pub fn in_world(position: Vector3<f64>) -> Self {
        Self { position, frame: LandmarkFrame::World }
    }

    /// Camera-frame depth (third coordinate).
    pub fn depth(&self) -> f64 {
        self.position.z
    }
}

/// Rigid transform with the body-to-world convention: `apply` maps
/// body-frame coordinates into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = rotation_residual(&rotation);
        if residual > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(residual));
        }
        Ok(Self { rotation, translation })
    }

    /// Builds from parts that are already known to be a proper rotation
    /// (compositions, exponentials). Debug builds still check.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(rotation_residual(&rotation) < 1e-6);
        Self { rotation, translation }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_parts_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::from_parts_unchecked(rt, -(rt * self.translation))
    }

    /// Maps body-frame coordinates to world-frame coordinates.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World point expressed in this pose's body frame.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotation angle of `self` in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Relative camera motion from frame k to frame k−1: maps a landmark's
/// camera-frame coordinates at k to its coordinates at k−1.
#[derive(Debug, Clone, Copy)]
pub struct CameraMotion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraMotion {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = rotation_residual(&rotation);
        if residual > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(residual));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Motion k→k−1 between two body-to-world camera poses.
    pub fn between(current: &Pose, previous: &Pose) -> Self {
        let rel = previous.inverse().compose(current);
        Self { rotation: *rel.rotation(), translation: *rel.translation() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
}

/// Projects a camera-frame landmark to the image plane.
pub fn project(m: &Landmark, k: &CameraIntrinsics) -> Result<PixelPoint, GeometryError> {
    debug_assert_eq!(m.frame, LandmarkFrame::CameraBody);
    let d = m.depth();
    if d <= 0.0 {
        return Err(GeometryError::DegenerateProjection(d));
    }
    Ok(PixelPoint::new(
        k.fx * m.position.x / d + k.cx,
        k.fy * m.position.y / d + k.cy,
    ))
}

/// Lifts a pixel back to a camera-frame landmark at the given depth.
pub fn backproject(p: PixelPoint, depth: f64, k: &CameraIntrinsics) -> Result<Landmark, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Landmark::in_camera(Vector3::new(
        depth * (p.u - k.cx) / k.fx,
        depth * (p.v - k.cy) / k.fy,
        depth,
    )))
}

/// Where a static landmark seen at frame k sits in the frame-(k−1) camera.
pub fn transform_static(m_k: &Landmark, motion: &CameraMotion) -> Landmark {
    debug_assert_eq!(m_k.frame, LandmarkFrame::CameraBody);
    Landmark::in_camera(motion.rotation * m_k.position + motion.translation)
}

/// Optical flow at pixel `p_k` induced by camera motion alone, using the
/// small-depth-change linearization: the image-position term K(I−R)K⁻¹[p;1]
/// plus the parallax term −(1/d_prev)·Kt, keeping the first two rows.
pub fn camera_flow(
    p_k: PixelPoint,
    d_prev: f64,
    motion: &CameraMotion,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    if d_prev <= 0.0 {
        return Err(GeometryError::InvalidDepth(d_prev));
    }
    let km = k.matrix();
    let p_h = Vector3::new(p_k.u, p_k.v, 1.0);
    let position_term = km * (Matrix3::identity() - motion.rotation) * k.inverse_matrix() * p_h;
    let parallax_term = km * motion.translation / d_prev;
    Ok(Vector2::new(
        position_term.x - parallax_term.x,
        position_term.y - parallax_term.y,
    ))
}

/// Expected flow difference between two adjacent features: the object flow
/// of feature j minus the depth-gap parallax (1/d_j − 1/d_i)·Kt. The
/// position-dependent term cancels for adjacent pixels; this is the oracle
/// used to test that cancellation.
pub fn predicted_flow_difference(
    p_i: PixelPoint,
    p_j: PixelPoint,
    d_i: f64,
    d_j: f64,
    obj_flow_j: Vector2<f64>,
    translation: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    debug_assert!(p_i.distance(p_j) <= 2.0 + 1e-12, "features must be adjacent");
    if d_i <= 0.0 {
        return Err(GeometryError::InvalidDepth(d_i));
    }
    if d_j <= 0.0 {
        return Err(GeometryError::InvalidDepth(d_j));
    }
    let kt = k.matrix() * translation;
    let gap = 1.0 / d_j - 1.0 / d_i;
    Ok(obj_flow_j - gap * Vector2::new(kt.x, kt.y))
}
