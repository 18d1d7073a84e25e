//! Pinhole RGB-D camera model.
//!
//! Camera frame: x right, y down (image rows), z along the optical axis.
//! The world pose is given as an eye position, a look-at point and the world
//! direction that should appear toward the top of the image.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub position: Vector3<f64>,
    pub look_at: Vector3<f64>,
    pub up: Vector3<f64>,
}

impl Default for CameraIntrinsics {
    /// 4x-downscaled D415-like sensor looking straight down at the workspace.
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            fx: 115.2,
            fy: 115.2,
            cx: 80.0,
            cy: 60.0,
            depth_min: 0.16,
            depth_max: 2.0,
            position: Vector3::new(0.30, 0.0, 0.75),
            look_at: Vector3::new(0.30, 0.0, 0.0),
            up: Vector3::new(1.0, 0.0, 0.0),
        }
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
}

impl CameraPose {
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.position
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_world - self.position)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }
}

impl CameraIntrinsics {
    /// Default optics with the camera frame equal to the world frame.
    pub fn identity_pose() -> Self {
        Self {
            position: Vector3::zeros(),
            look_at: Vector3::z(),
            up: -Vector3::y(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("image dimensions must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(SceneError::InvalidCamera("depth range must satisfy 0 < min < max"));
        }
        let forward = self.look_at - self.position;
        if forward.norm() < 1e-12 || forward.normalize().cross(&self.up).norm() < 1e-9 {
            return Err(SceneError::InvalidCamera("look_at and up must define an orientation"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pose(&self) -> CameraPose {
        let z = (self.look_at - self.position).normalize();
        let down = -self.up;
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        CameraPose {
            rotation: Rotation3::from_matrix_unchecked(m),
            position: self.position,
        }
    }

    /// Camera-frame direction through pixel `(u, v)` with unit z component, so
    /// the ray parameter of a hit equals its z-depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn back_project_camera(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, SceneError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(SceneError::InvalidDepth(depth));
        }
        Ok(self.pixel_ray(u, v) * depth)
    }

    /// World point seen at pixel `(u, v)` with z-depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, SceneError> {
        Ok(self.pose().to_world(&self.back_project_camera(u, v, depth)?))
    }

    /// Continuous pixel coordinates and z-depth of a world point, or `None`
    /// when it lies behind the camera.
    pub fn project(&self, p_world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.pose().to_camera(p_world);
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }
}

/// Free-function form of [`CameraIntrinsics::back_project`].
pub fn back_project(u: f64, v: f64, depth: f64, cam: &CameraIntrinsics) -> Result<Vector3<f64>, SceneError> {
    cam.back_project(u, v, depth)
}
