use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::GeometryError;

/// Rigid camera-to-world transform. Translation is in meters.
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

impl CameraPose {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validating constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        let dev = pose.orthonormality_error();
        if dev > Self::ORTHONORMAL_TOL || !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(pose)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    /// Rotation about the camera +y axis.
    pub fn yaw_degrees(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        let rotation = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        Self { rotation, translation: Vector3::zeros() }
    }

    /// Rotation about the camera +x axis; positive values tilt the view up.
    pub fn pitch_degrees(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        let rotation = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        Self { rotation, translation: Vector3::zeros() }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `inverse(self) ∘ other`: pose of `other` expressed in the frame of `self`.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a world point into this camera's frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Geodesic rotation angle in radians, accurate for small angles.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// max(|RᵀR − I|, |det R − 1|)
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }

    pub fn approx_eq(&self, other: &CameraPose, tol: f64) -> bool {
        (self.rotation - other.rotation).abs().max() <= tol
            && (self.translation - other.translation).abs().max() <= tol
    }
}

/// Geodesic angle of a rotation matrix via atan2(sin, cos).
pub(crate) fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * axis.norm();
    sin.atan2(cos)
}
