//! Ray-cast RGB-D rendering with z-buffering and flat Lambert shading, plus
//! the depth-noise model applied to "real" frames.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, SceneObject};

pub const DEFAULT_BACKGROUND: [u8; 3] = [32, 32, 40];

const AMBIENT: f64 = 0.35;

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.3, -0.2, 1.0).normalize()
}

/// Paired color and depth rasters, row-major. Depth is z-depth in meters,
/// `0.0` marking an invalid pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub depth: Vec<f64>,
    pub timestamp_us: u64,
}

impl RgbdFrame {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: color.iter().copied().cycle().take(width * height * 3).collect(),
            depth: vec![0.0; width * height],
            timestamp_us: 0,
        }
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[self.index(u, v)]
    }

    pub fn rgb_at(&self, u: usize, v: usize) -> [u8; 3] {
        let i = 3 * self.index(u, v);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn same_shape(&self, other: &RgbdFrame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// A rendered frame together with the instance visible at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderLayers {
    pub frame: RgbdFrame,
    pub instance: Vec<Option<u32>>,
}

/// Nearest object hit along every pixel ray; calls `visit(pixel, object, hit_depth, normal)`
/// for the winner of each pixel.
pub(crate) fn cast<F>(objects: &[SceneObject], cam: &CameraIntrinsics, mut visit: F)
where
    F: FnMut(usize, usize, &SceneObject, f64, Vector3<f64>),
{
    let pose = cam.pose();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = pose.rotation * cam.pixel_ray(u as f64, v as f64);
            let mut best: Option<(usize, f64, Vector3<f64>)> = None;
            for (k, obj) in objects.iter().enumerate() {
                if let Some(hit) = obj.shape.intersect(&pose.position, &dir) {
                    if best.is_none_or(|(_, t, _)| hit.t < t) {
                        best = Some((k, hit.t, hit.normal));
                    }
                }
            }
            if let Some((k, t, n)) = best {
                visit(u, v, &objects[k], t, n);
            }
        }
    }
}

pub fn render_layers(objects: &[SceneObject], cam: &CameraIntrinsics, background: [u8; 3]) -> RenderLayers {
    let mut frame = RgbdFrame::filled(cam.width, cam.height, background);
    let mut instance = vec![None; cam.pixel_count()];
    let light = light_dir();
    cast(objects, cam, |u, v, obj, depth, normal| {
        let i = v * cam.width + u;
        let shade = AMBIENT + (1.0 - AMBIENT) * normal.dot(&light).max(0.0);
        for c in 0..3 {
            frame.rgb[3 * i + c] = (obj.color[c] as f64 * shade).round().clamp(0.0, 255.0) as u8;
        }
        frame.depth[i] = if (cam.depth_min..=cam.depth_max).contains(&depth) {
            depth
        } else {
            0.0
        };
        instance[i] = Some(obj.instance_id);
    });
    RenderLayers { frame, instance }
}

pub fn render_rgbd(objects: &[SceneObject], cam: &CameraIntrinsics, background: [u8; 3]) -> RgbdFrame {
    render_layers(objects, cam, background).frame
}

/// Depth-dependent Gaussian noise (`sigma = sigma_coeff * depth^2`) and
/// random dropout on valid pixels. Pixels are visited in row-major order,
/// each drawing its dropout trial before its noise sample.
pub fn add_depth_noise(frame: &RgbdFrame, sigma_coeff: f64, dropout_p: f64, seed: u64) -> RgbdFrame {
    let mut out = frame.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in out.depth.iter_mut() {
        if *d <= 0.0 {
            continue;
        }
        if dropout_p > 0.0 && rng.random::<f64>() < dropout_p {
            *d = 0.0;
            continue;
        }
        if sigma_coeff > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let noisy = *d + z * sigma_coeff * *d * *d;
            *d = if noisy > 0.0 { noisy } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Shape;

    fn sphere(center: Vector3<f64>, radius: f64, id: u32) -> SceneObject {
        SceneObject {
            instance_id: id,
            class_id: 0,
            shape: Shape::Sphere { center, radius },
            color: [200, 50, 50],
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = CameraIntrinsics::identity_pose();
        let f = render_rgbd(&[], &cam, [1, 2, 3]);
        assert!(f.depth.iter().all(|&d| d == 0.0));
        assert!(f.rgb.chunks(3).all(|c| c == [1, 2, 3]));
    }

    #[test]
    fn centered_sphere_depth() {
        let cam = CameraIntrinsics::identity_pose();
        let (d, r) = (0.9, 0.1);
        let f = render_rgbd(&[sphere(Vector3::new(0.0, 0.0, d), r, 1)], &cam, DEFAULT_BACKGROUND);
        let center = f.depth_at(cam.cx as usize, cam.cy as usize);
        assert!((center - (d - r)).abs() <= 1e-3, "center depth {center}");
    }

    #[test]
    fn nearer_object_wins_every_contested_pixel() {
        let cam = CameraIntrinsics::identity_pose();
        let near = sphere(Vector3::new(0.0, 0.0, 0.8), 0.1, 1);
        let far = sphere(Vector3::new(0.05, 0.0, 1.0), 0.15, 2);
        let both = render_layers(&[far, near], &cam, DEFAULT_BACKGROUND);
        let only_near = render_layers(&[near], &cam, DEFAULT_BACKGROUND);
        let only_far = render_layers(&[far], &cam, DEFAULT_BACKGROUND);
        let mut contested = 0;
        for i in 0..cam.pixel_count() {
            if only_near.instance[i].is_some() && only_far.instance[i].is_some() {
                contested += 1;
                assert_eq!(both.instance[i], Some(1));
                assert_eq!(both.frame.depth[i], only_near.frame.depth[i]);
            }
        }
        assert!(contested > 100);
    }

    #[test]
    fn too_close_surface_is_invalid_depth() {
        let cam = CameraIntrinsics::identity_pose();
        let f = render_rgbd(&[sphere(Vector3::new(0.0, 0.0, 0.15), 0.05, 1)], &cam, DEFAULT_BACKGROUND);
        assert_eq!(f.depth_at(80, 60), 0.0);
        assert_ne!(f.rgb_at(80, 60), DEFAULT_BACKGROUND);
    }

    #[test]
    fn noise_free_is_identity_and_full_dropout_clears() {
        let cam = CameraIntrinsics::default();
        let table = SceneObject {
            instance_id: 1,
            class_id: 0,
            shape: Shape::Box {
                center: Vector3::new(0.3, 0.0, -0.025),
                half_extents: Vector3::new(1.0, 1.0, 0.025),
            },
            color: [200, 200, 200],
        };
        let f = render_rgbd(&[table], &cam, DEFAULT_BACKGROUND);
        assert_eq!(add_depth_noise(&f, 0.0, 0.0, 9), f);
        assert!(add_depth_noise(&f, 0.0, 1.0, 9).depth.iter().all(|&d| d == 0.0));
        assert_eq!(add_depth_noise(&f, 0.01, 0.1, 9), add_depth_noise(&f, 0.01, 0.1, 9));
        assert_ne!(add_depth_noise(&f, 0.01, 0.0, 9), add_depth_noise(&f, 0.01, 0.0, 10));
    }
}
