//! Shared geometric types and frame conventions.
//!
//! # Frames
//!
//! - **World**: East-North-Up. Yaw is measured about +z from +x.
//! - **Body**: x forward, y left, z up.
//! - **Camera optical**: x right, y down, z forward. Depth is z-depth, the
//!   distance along the optical axis rather than along the viewing ray.
//!
//! A camera pose maps optical-frame points into the world; it is obtained
//! from a body pose with [`camera_pose_from_body`].

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A point or direction in meters.
pub type Vec3 = Vector3<f64>;

/// Rigid transform (rotation + translation). Applying a pose to a point maps
/// it from the pose's local frame into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    iso: Isometry3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            iso: Isometry3::identity(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            iso: Isometry3::from_parts(Translation3::from(translation), rotation),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from a rotation matrix. The matrix is re-orthonormalized.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix(&rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Planar pose: position plus heading about world +z.
    pub fn from_position_yaw(position: Vec3, yaw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            position,
        )
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.iso.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.iso.rotation.to_rotation_matrix().matrix()
    }

    pub fn translation(&self) -> Vec3 {
        self.iso.translation.vector
    }

    /// Heading of the local +x axis projected onto the world xy-plane.
    pub fn yaw(&self) -> f64 {
        let x = self.iso.rotation * Vec3::x();
        x.y.atan2(x.x)
    }

    /// `self ∘ other`: applying the result equals applying `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            iso: self.iso * other.iso,
        }
    }

    pub fn inverse(&self) -> Pose {
        Pose {
            iso: self.iso.inverse(),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.iso.rotation * p + self.iso.translation.vector
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.iso.rotation * v
    }

    pub fn as_isometry(&self) -> &Isometry3<f64> {
        &self.iso
    }
}

/// Composes two poses; see [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn transform_point(p: &Pose, x: &Vec3) -> Vec3 {
    p.transform_point(x)
}

/// Rotation taking optical-frame coordinates into the body frame.
///
/// Optical z (forward) is body +x, optical x (right) is body −y and optical
/// y (down) is body −z.
pub fn optical_to_body_matrix() -> Matrix3<f64> {
    Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    )
}

pub fn optical_to_body() -> Pose {
    // exact: the matrix is already a rotation
    let rot = Rotation3::from_matrix_unchecked(optical_to_body_matrix());
    Pose::new(UnitQuaternion::from_rotation_matrix(&rot), Vec3::zeros())
}

/// Camera (optical frame) pose for a forward-facing camera mounted at the
/// body origin.
pub fn camera_pose_from_body(body: &Pose) -> Pose {
    body.compose(&optical_to_body())
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
