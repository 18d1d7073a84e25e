//! Visibility-based stand-in for the learned known-object detector.
//!
//! Confidence degrades with occlusion (visible / unoccluded silhouette
//! pixels), is halved when the visible mask touches the image border, and
//! objects with any surface nearer than the sensor's minimum range are not
//! reported at all. Positions are lifted from the mask: the centroid of the
//! back-projected mask pixels, pushed along the optical axis by the class
//! template's visible-surface-to-centroid offset.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::render_layers;
use super::{CameraIntrinsics, ObjectRegistry, RgbdFrame, SceneObject};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u16,
    pub confidence: f64,
    pub position: Vector3<f64>,
    pub instance_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub noise_stddev: f64,
    pub boundary_factor: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            noise_stddev: 0.02,
            boundary_factor: 0.5,
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Silhouette {
    pixels: usize,
    min_depth: f64,
}

pub fn detect_known_objects(
    frame: &RgbdFrame,
    scene: &[SceneObject],
    cam: &CameraIntrinsics,
    registry: &ObjectRegistry,
    params: &DetectorParams,
    seed: u64,
) -> Vec<Detection> {
    let cataloged: Vec<&SceneObject> = scene
        .iter()
        .filter(|o| o.class_id != 0 && registry.get(o.class_id).is_some())
        .collect();
    if cataloged.is_empty() {
        return Vec::new();
    }

    let visible = render_layers(scene, cam, [0, 0, 0]).instance;
    let silhouettes = silhouettes(&cataloged, cam);
    let pose = cam.pose();
    let forward = pose.forward();
    let noise = Normal::new(0.0, params.noise_stddev.max(0.0)).expect("finite stddev");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut out = Vec::new();
    for (obj, sil) in cataloged.iter().zip(silhouettes) {
        if sil.pixels == 0 || sil.min_depth < cam.depth_min {
            continue;
        }
        let entry = registry.get(obj.class_id).expect("filtered above");

        let mut count = 0usize;
        let mut sum = Vector3::zeros();
        let mut lifted = 0usize;
        let (mut u_min, mut u_max, mut v_min, mut v_max) = (usize::MAX, 0, usize::MAX, 0);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let i = v * cam.width + u;
                if visible[i] != Some(obj.instance_id) {
                    continue;
                }
                count += 1;
                u_min = u_min.min(u);
                u_max = u_max.max(u);
                v_min = v_min.min(v);
                v_max = v_max.max(v);
                let d = frame.depth[i];
                if d > 0.0 {
                    sum += pose.to_world(&cam.pixel_ray(u as f64, v as f64).scale(d));
                    lifted += 1;
                }
            }
        }
        if count == 0 || lifted == 0 {
            continue;
        }

        let visibility = count as f64 / sil.pixels as f64;
        let mut confidence = entry.base_confidence * visibility;
        let on_border = u_min == 0 || v_min == 0 || u_max + 1 == cam.width || v_max + 1 == cam.height;
        if on_border {
            confidence *= params.boundary_factor;
        }
        if params.noise_stddev > 0.0 {
            confidence += noise.sample(&mut rng);
        }
        let confidence = confidence.clamp(0.0, 1.0);

        let surface_centroid = sum / lifted as f64;
        let position = surface_centroid + forward * entry.template.view_depth_offset(&forward);
        out.push(Detection {
            class_id: obj.class_id,
            confidence,
            position,
            instance_id: obj.instance_id,
        });
    }
    out
}

/// Unoccluded footprint of each object: pixels whose ray hits it at all, and
/// the nearest such hit depth.
fn silhouettes(objects: &[&SceneObject], cam: &CameraIntrinsics) -> Vec<Silhouette> {
    let pose = cam.pose();
    let mut out = vec![
        Silhouette {
            pixels: 0,
            min_depth: f64::INFINITY
        };
        objects.len()
    ];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = pose.rotation * cam.pixel_ray(u as f64, v as f64);
            for (k, obj) in objects.iter().enumerate() {
                if let Some(hit) = obj.shape.intersect(&pose.position, &dir) {
                    out[k].pixels += 1;
                    out[k].min_depth = out[k].min_depth.min(hit.t);
                }
            }
        }
    }
    out
}
