//! Foreign-object detection by comparing the real camera frame against the
//! twin's synthetic render.
//!
//! Pipeline: grayscale and normalized-depth planes, per-pixel SSIM on both,
//! pixel-wise minimum fusion, threshold, erosion then dilation, and
//! back-projection of the surviving pixels that carry valid real depth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{CameraIntrinsics, RgbdFrame};

#[derive(Debug, Error, PartialEq)]
pub enum DiscrepancyError {
    #[error("shape mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    Shape {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
}

/// Single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.data[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMask {
    pub fused: Vec<f64>,
    pub binary: BinaryMask,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyCloud {
    pub points: Vec<Vector3<f64>>,
    pub timestamp_us: u64,
}

impl DiscrepancyCloud {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64)
    }

    /// Every `k`-th point so that at most `max_points` remain.
    pub fn decimated(&self, max_points: usize) -> DiscrepancyCloud {
        if self.points.len() <= max_points || max_points == 0 {
            let points = if max_points == 0 { Vec::new() } else { self.points.clone() };
            return DiscrepancyCloud {
                points,
                timestamp_us: self.timestamp_us,
            };
        }
        let step = self.points.len().div_ceil(max_points);
        DiscrepancyCloud {
            points: self.points.iter().step_by(step).copied().collect(),
            timestamp_us: self.timestamp_us,
        }
    }

    /// Plain-text export, one `x y z` triple per line.
    pub fn to_xyz(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 30);
        for p in &self.points {
            out.push_str(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, p.z));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancyParams {
    pub window: usize,
    pub dynamic_range: f64,
    pub tau: f64,
    pub erode: usize,
    pub dilate: usize,
}

impl Default for DiscrepancyParams {
    fn default() -> Self {
        Self {
            window: 7,
            dynamic_range: 255.0,
            tau: 0.6,
            erode: 3,
            dilate: 5,
        }
    }
}

impl DiscrepancyParams {
    pub fn validate(&self) -> Result<(), DiscrepancyError> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(DiscrepancyError::InvalidParams("window must be odd and >= 3"));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(DiscrepancyError::InvalidParams("dynamic range must be positive"));
        }
        if self.erode == 0 || self.erode.is_multiple_of(2) || self.dilate == 0 || self.dilate.is_multiple_of(2) {
            return Err(DiscrepancyError::InvalidParams("morphology kernels must be odd and >= 1"));
        }
        if !self.tau.is_finite() {
            return Err(DiscrepancyError::InvalidParams("threshold must be finite"));
        }
        Ok(())
    }
}

fn check_shape(aw: usize, ah: usize, bw: usize, bh: usize) -> Result<(), DiscrepancyError> {
    if aw != bw || ah != bh {
        return Err(DiscrepancyError::Shape {
            left_w: aw,
            left_h: ah,
            right_w: bw,
            right_h: bh,
        });
    }
    Ok(())
}

/// Luma plane using 0.299 / 0.587 / 0.114 weights.
pub fn grayscale(frame: &RgbdFrame) -> Plane {
    let data = frame
        .rgb
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
        .collect();
    Plane::new(frame.width, frame.height, data)
}

/// Depth mapped linearly from `[depth_min, depth_max]` onto `[0, 255]`; invalid pixels map to 0.
pub fn normalize_depth(frame: &RgbdFrame, cam: &CameraIntrinsics) -> Plane {
    let span = cam.depth_max - cam.depth_min;
    let data = frame
        .depth
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (255.0 * (d - cam.depth_min) / span).clamp(0.0, 255.0)
            } else {
                0.0
            }
        })
        .collect();
    Plane::new(frame.width, frame.height, data)
}

/// Clamped-window box sums of `data` along both axes.
fn box_sums(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; w * h];
    for v in 0..h {
        let row = &data[v * w..(v + 1) * w];
        let mut prefix = vec![0.0; w + 1];
        for u in 0..w {
            prefix[u + 1] = prefix[u] + row[u];
        }
        for u in 0..w {
            let lo = u.saturating_sub(r);
            let hi = (u + r + 1).min(w);
            rows[v * w + u] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![0.0; w * h];
    for u in 0..w {
        let mut prefix = vec![0.0; h + 1];
        for v in 0..h {
            prefix[v + 1] = prefix[v] + rows[v * w + u];
        }
        for v in 0..h {
            let lo = v.saturating_sub(r);
            let hi = (v + r + 1).min(h);
            out[v * w + u] = prefix[hi] - prefix[lo];
        }
    }
    out
}

/// Per-pixel SSIM over a uniform `window`×`window` neighborhood, shrunk to
/// fit at the image borders.
pub fn ssim_map(a: &Plane, b: &Plane, window: usize, dynamic_range: f64) -> Result<SsimMap, DiscrepancyError> {
    check_shape(a.width, a.height, b.width, b.height)?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(DiscrepancyError::InvalidParams("window must be odd and >= 3"));
    }
    let (w, h) = (a.width, a.height);
    let r = window / 2;
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);

    let aa: Vec<f64> = a.data.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.data.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let sa = box_sums(&a.data, w, h, r);
    let sb = box_sums(&b.data, w, h, r);
    let saa = box_sums(&aa, w, h, r);
    let sbb = box_sums(&bb, w, h, r);
    let sab = box_sums(&ab, w, h, r);

    let mut values = Vec::with_capacity(w * h);
    for v in 0..h {
        let rows = ((v + r + 1).min(h) - v.saturating_sub(r)) as f64;
        for u in 0..w {
            let cols = ((u + r + 1).min(w) - u.saturating_sub(r)) as f64;
            let n = rows * cols;
            let i = v * w + u;
            let (ma, mb) = (sa[i] / n, sb[i] / n);
            let va = (saa[i] / n - ma * ma).max(0.0);
            let vb = (sbb[i] / n - mb * mb).max(0.0);
            let cov = sab[i] / n - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            values.push(s.min(1.0));
        }
    }
    // Identical windows give exactly 1 analytically; rounding in the sums can leave it a hair off.
    for (i, s) in values.iter_mut().enumerate() {
        if a.data[i] == b.data[i] && (*s - 1.0).abs() < 1e-9 && window_identical(a, b, i, r) {
            *s = 1.0;
        }
    }
    Ok(SsimMap { width: w, height: h, values })
}

fn window_identical(a: &Plane, b: &Plane, i: usize, r: usize) -> bool {
    let (w, h) = (a.width, a.height);
    let (u, v) = (i % w, i / w);
    for y in v.saturating_sub(r)..(v + r + 1).min(h) {
        let lo = y * w + u.saturating_sub(r);
        let hi = y * w + (u + r + 1).min(w);
        if a.data[lo..hi] != b.data[lo..hi] {
            return false;
        }
    }
    true
}

/// Pointwise minimum of the two maps, flagged where it falls below `tau`.
pub fn fuse_and_binarize(ssim_rgb: &SsimMap, ssim_d: &SsimMap, tau: f64) -> Result<FusedMask, DiscrepancyError> {
    check_shape(ssim_rgb.width, ssim_rgb.height, ssim_d.width, ssim_d.height)?;
    let fused: Vec<f64> = ssim_rgb.values.iter().zip(&ssim_d.values).map(|(a, b)| a.min(*b)).collect();
    let data = fused.iter().map(|&f| f < tau).collect();
    Ok(FusedMask {
        fused,
        binary: BinaryMask {
            width: ssim_rgb.width,
            height: ssim_rgb.height,
            data,
        },
    })
}

/// Square-kernel erosion; the window is clipped to the image, so pixels
/// outside it never erode a region.
pub fn erode(mask: &BinaryMask, kernel: usize) -> BinaryMask {
    morph(mask, kernel, true)
}

/// Square-kernel dilation, window clipped to the image.
pub fn dilate(mask: &BinaryMask, kernel: usize) -> BinaryMask {
    morph(mask, kernel, false)
}

fn morph(mask: &BinaryMask, kernel: usize, all: bool) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let r = kernel / 2;
    // Separable: a square window is a row pass followed by a column pass.
    let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
        let mut out = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let (c, len) = if horizontal { (u, w) } else { (v, h) };
                let lo = c.saturating_sub(r);
                let hi = (c + r + 1).min(len);
                let mut it = (lo..hi).map(|k| if horizontal { src[v * w + k] } else { src[k * w + u] });
                out[v * w + u] = if all { it.all(|x| x) } else { it.any(|x| x) };
            }
        }
        out
    };
    let rows = pass(&mask.data, true);
    BinaryMask {
        width: w,
        height: h,
        data: pass(&rows, false),
    }
}

/// Erosion with an `erode_kernel` square followed by dilation with a `dilate_kernel` square.
pub fn morph_open(mask: &BinaryMask, erode_kernel: usize, dilate_kernel: usize) -> BinaryMask {
    dilate(&erode(mask, erode_kernel), dilate_kernel)
}

/// Back-projects every flagged pixel that has valid real depth.
pub fn extract_point_cloud(
    mask: &BinaryMask,
    depth: &RgbdFrame,
    cam: &CameraIntrinsics,
) -> Result<DiscrepancyCloud, DiscrepancyError> {
    check_shape(mask.width, mask.height, depth.width, depth.height)?;
    let pose = cam.pose();
    let mut points = Vec::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            let i = v * mask.width + u;
            let d = depth.depth[i];
            if mask.data[i] && d > 0.0 && d.is_finite() {
                points.push(pose.to_world(&cam.pixel_ray(u as f64, v as f64).scale(d)));
            }
        }
    }
    Ok(DiscrepancyCloud {
        points,
        timestamp_us: depth.timestamp_us,
    })
}

/// Intermediate rasters of a full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyTrace {
    pub ssim_rgb: SsimMap,
    pub ssim_depth: SsimMap,
    pub fused: FusedMask,
    pub processed: BinaryMask,
    pub cloud: DiscrepancyCloud,
}

pub fn detect_discrepancies_traced(
    real: &RgbdFrame,
    synthetic: &RgbdFrame,
    cam: &CameraIntrinsics,
    params: &DiscrepancyParams,
) -> Result<DiscrepancyTrace, DiscrepancyError> {
    params.validate()?;
    check_shape(real.width, real.height, synthetic.width, synthetic.height)?;
    check_shape(real.width, real.height, cam.width, cam.height)?;
    let ssim_rgb = ssim_map(&grayscale(real), &grayscale(synthetic), params.window, params.dynamic_range)?;
    let ssim_depth = ssim_map(
        &normalize_depth(real, cam),
        &normalize_depth(synthetic, cam),
        params.window,
        params.dynamic_range,
    )?;
    let fused = fuse_and_binarize(&ssim_rgb, &ssim_depth, params.tau)?;
    let processed = morph_open(&fused.binary, params.erode, params.dilate);
    let cloud = extract_point_cloud(&processed, real, cam)?;
    Ok(DiscrepancyTrace {
        ssim_rgb,
        ssim_depth,
        fused,
        processed,
        cloud,
    })
}

pub fn detect_discrepancies(
    real: &RgbdFrame,
    synthetic: &RgbdFrame,
    cam: &CameraIntrinsics,
    params: &DiscrepancyParams,
) -> Result<DiscrepancyCloud, DiscrepancyError> {
    Ok(detect_discrepancies_traced(real, synthetic, cam, params)?.cloud)
}
