//! Remote world model and synthetic RGB-D camera.
//!
//! The scene file is TOML:
//!
//! ```toml
//! background = [32, 32, 40]
//!
//! [camera]              # any omitted field takes the default sensor value
//! width = 160
//! height = 120
//! position = [0.30, 0.0, 0.75]
//! look_at = [0.30, 0.0, 0.0]
//! up = [1.0, 0.0, 0.0]
//!
//! [[objects]]
//! instance_id = 1
//! class_id = 0          # 0 = unknown / foreign, otherwise a registry class
//! color = [190, 190, 190]
//! shape = { type = "box", center = [0.3, 0.0, -0.025], half_extents = [0.5, 0.5, 0.025] }
//!
//! [[registry]]
//! class_id = 3
//! name = "scalpel"
//! base_confidence = 0.97
//! color = [220, 220, 60]
//! template = { type = "box", center = [0, 0, 0], half_extents = [0.03, 0.008, 0.004] }
//! ```
//!
//! Shapes are `{ type = "sphere", center, radius }`,
//! `{ type = "box", center, half_extents }` (axis-aligned) and
//! `{ type = "cylinder", base, radius, height }` (upright).

mod camera;
mod detect;
pub mod frames;
mod geometry;
mod render;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{back_project, CameraIntrinsics, CameraPose};
pub use detect::{detect_known_objects, Detection, DetectorParams};
pub use geometry::{Hit, Shape};
pub use render::{add_depth_noise, render_layers, render_rgbd, RenderLayers, RgbdFrame, DEFAULT_BACKGROUND};

use crate::kinematics::{ArmModel, JointVector};

/// Class id reserved for the robot's own body primitives.
pub const ROBOT_CLASS: u16 = u16::MAX;
/// Instance ids at or above this value belong to the robot body.
pub const ROBOT_INSTANCE_BASE: u32 = 0xFFFF_0000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("invalid object {instance_id}: {reason}")]
    InvalidObject { instance_id: u32, reason: String },
    #[error("scene file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("frame file: {0}")]
    Image(#[from] image::ImageError),
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: u32,
    /// `0` marks an unknown (foreign) object.
    #[serde(default)]
    pub class_id: u16,
    pub shape: Shape,
    pub color: [u8; 3],
}

impl SceneObject {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.shape.is_valid() {
            return Err(SceneError::InvalidObject {
                instance_id: self.instance_id,
                reason: "dimensions must be positive and finite".into(),
            });
        }
        Ok(())
    }

    pub fn is_robot(&self) -> bool {
        self.class_id == ROBOT_CLASS
    }
}

/// Catalog entry for an object class the detector was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub class_id: u16,
    pub name: String,
    /// Canonical geometry; placed by moving its centroid.
    pub template: Shape,
    pub color: [u8; 3],
    #[serde(default = "default_base_confidence")]
    pub base_confidence: f64,
}

fn default_base_confidence() -> f64 {
    0.97
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ObjectRegistry {
    pub fn get(&self, class_id: u16) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.class_id == class_id)
    }

    pub fn by_name(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Scene object for a cataloged class with its centroid at `position`.
    pub fn instantiate(&self, class_id: u16, instance_id: u32, position: Vector3<f64>) -> Option<SceneObject> {
        self.get(class_id).map(|e| SceneObject {
            instance_id,
            class_id,
            shape: e.template.with_centroid(position),
            color: e.color,
        })
    }
}

/// Contents of a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneDescription {
    pub background: [u8; 3],
    pub camera: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
    pub registry: ObjectRegistry,
}

impl Default for SceneDescription {
    fn default() -> Self {
        Self {
            background: DEFAULT_BACKGROUND,
            camera: CameraIntrinsics::default(),
            objects: Vec::new(),
            registry: ObjectRegistry::default(),
        }
    }
}

impl SceneDescription {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let scene: SceneDescription = toml::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.camera.validate()?;
        for o in &self.objects {
            o.validate()?;
        }
        for e in &self.registry.entries {
            if !e.template.is_valid() || !(0.0..=1.0).contains(&e.base_confidence) {
                return Err(SceneError::InvalidObject {
                    instance_id: 0,
                    reason: format!("registry entry {} ({}) is invalid", e.class_id, e.name),
                });
            }
        }
        Ok(())
    }
}

/// Sphere-chain approximation of the arm body for rendering and occlusion.
pub fn robot_body(model: &ArmModel, q: &JointVector) -> Vec<SceneObject> {
    const COLOR: [u8; 3] = [110, 120, 150];
    let shoulder = model.shoulder();
    let elbow = model.elbow_position(q);
    let tip = model.tip(q);
    let mut out = vec![SceneObject {
        instance_id: ROBOT_INSTANCE_BASE,
        class_id: ROBOT_CLASS,
        shape: Shape::Cylinder {
            base: Vector3::zeros(),
            radius: 0.045,
            height: model.base_height,
        },
        color: COLOR,
    }];
    let mut push_link = |from: Vector3<f64>, to: Vector3<f64>, radius: f64, n: usize| {
        for k in 0..=n {
            let center = from + (to - from) * (k as f64 / n as f64);
            out.push(SceneObject {
                instance_id: ROBOT_INSTANCE_BASE + out.len() as u32,
                class_id: ROBOT_CLASS,
                shape: Shape::Sphere { center, radius },
                color: COLOR,
            });
        }
    };
    push_link(shoulder, elbow, 0.028, 6);
    // The last forearm sphere stops short of the tool tip so the tip itself stays uncovered.
    push_link(elbow, elbow + (tip - elbow) * 0.85, 0.022, 5);
    out
}
