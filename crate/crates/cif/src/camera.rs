//! Pinhole camera with a rigid world-to-camera transform.

use nalgebra::{Matrix3, Vector3};
use crate::error::{Error, Result};

/// Pinhole camera. `rotation`/`translation` map world points into the camera
/// frame (`x_cam = R * x_world + t`); the camera looks down +z.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Maximum deviation of `R^T R` from the identity accepted by [`Camera::new`].
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

impl Camera {
    /// Builds a camera, validating that focal lengths are positive, the image
    /// is non-empty, and the rotation is orthonormal within 1e-9.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument("principal point must be finite".into()));
        }
        let gram = rotation.transpose() * rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if !deviation.is_finite() || deviation > ORTHONORMALITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal: |R^T R - I| = {deviation:e}"
            )));
        }
        Ok(Camera { fx, fy, cx, cy, width, height, rotation, translation })
    }

    /// Camera at the world origin looking down +z with the given intrinsics.
    pub fn axis_aligned(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Camera::new(fx, fy, cx, cy, width, height, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera positioned at `eye`, looking at `target`, with `up` fixing the
    /// roll. The returned transform maps world points into a frame whose +z
    /// axis points from `eye` toward `target`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("look_at: up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation are the camera axes in world
        // coordinates: +x right, +y down (image convention), +z forward.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        Camera::new(fx, fy, cx, cy, width, height, rotation, translation)
    }

    /// World-to-camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// World-to-camera translation.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Maps a world point into the camera frame.
    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    /// Pixels in the image.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
