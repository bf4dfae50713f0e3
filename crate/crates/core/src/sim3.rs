//! Similarity transforms `x ↦ s R x + t`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{check_rotation, RigidPose, Vec3};
use crate::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(crate::Error::InvalidConfig(format!("similarity scale must be positive, got {scale}")));
        }
        check_rotation(&rotation)?;
        Ok(SimilarityTransform { scale, rotation, translation })
    }

    /// Builds a transform from log-scale, axis-angle rotation and translation.
    pub fn from_log(log_scale: f64, axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        SimilarityTransform { scale: log_scale.exp(), rotation: *Rotation3::new(axis_angle).matrix(), translation }
    }

    pub fn from_rigid(pose: &RigidPose) -> Self {
        SimilarityTransform { scale: 1.0, rotation: pose.rotation, translation: pose.translation }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.rotation * Vector3::from(p) * self.scale + self.translation;
        [q[0], q[1], q[2]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimilarityTransform { scale: inv_s, rotation: rt, translation: -(rt * self.translation) * inv_s }
    }

    /// Re-orthonormalizes the rotation after accumulated updates.
    pub fn renormalized(&self) -> Self {
        let r = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 64, Rotation3::identity());
        SimilarityTransform { rotation: *r.matrix(), ..*self }
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() / 2.0;
    s.atan2(c).to_degrees()
}

/// Angle between two directions in degrees; zero when either is degenerate.
pub fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-15 || nb < 1e-15 {
        return 0.0;
    }
    let c = a.dot(b) / (na * nb);
    let s = a.cross(b).norm() / (na * nb);
    s.atan2(c).to_degrees()
}
