//! Archimedean spiral reference path and path-deviation statistics.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::TaskError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralParams {
    /// Radius at the end of the last turn, meters.
    pub max_radius: f64,
    pub turns: f64,
    pub samples_per_turn: usize,
    /// Half-width of the printed path, meters.
    pub half_width: f64,
}

impl Default for SpiralParams {
    fn default() -> Self {
        Self {
            max_radius: 0.06,
            turns: 3.0,
            samples_per_turn: 200,
            half_width: 0.002,
        }
    }
}

impl SpiralParams {
    /// Archimedean coefficient `b` in `r = b * theta`, m/rad.
    pub fn coefficient(&self) -> f64 {
        self.max_radius / (TAU * self.turns)
    }
}

/// Polyline `r = b * theta` for `theta` in `[0, 2 pi turns]`, lying in the
/// horizontal plane through `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralReference {
    pub center: Vector3<f64>,
    pub b: f64,
    pub turns: f64,
    pub half_width: f64,
    pub samples: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
}

pub fn spiral_reference(
    b: f64,
    turns: f64,
    samples_per_turn: usize,
    center: Vector3<f64>,
    half_width: f64,
) -> Result<SpiralReference, TaskError> {
    if !(b > 0.0 && turns > 0.0 && half_width > 0.0 && samples_per_turn >= 4) {
        return Err(TaskError::Config(
            "spiral needs b > 0, turns > 0, half_width > 0 and at least 4 samples per turn".into(),
        ));
    }
    let n = (turns * samples_per_turn as f64).ceil() as usize;
    let theta_max = TAU * turns;
    let samples: Vec<Vector3<f64>> = (0..=n)
        .map(|i| {
            let theta = theta_max * i as f64 / n as f64;
            let r = b * theta;
            center + Vector3::new(r * theta.cos(), r * theta.sin(), 0.0)
        })
        .collect();
    let mut cumulative = Vec::with_capacity(samples.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in samples.windows(2) {
        acc += (w[1] - w[0]).norm();
        cumulative.push(acc);
    }
    Ok(SpiralReference {
        center,
        b,
        turns,
        half_width,
        samples,
        cumulative,
    })
}

/// Closest point on segment `a`-`b` to `p`, as the segment parameter in `[0, 1]`.
fn segment_param(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

impl SpiralReference {
    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("nonempty polyline")
    }

    pub fn start(&self) -> Vector3<f64> {
        self.samples[0]
    }

    pub fn end(&self) -> Vector3<f64> {
        *self.samples.last().expect("nonempty polyline")
    }

    /// Point at arc length `s` (clamped to the path).
    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        let s = s.clamp(0.0, self.length());
        let i = self.cumulative.partition_point(|&c| c <= s).clamp(1, self.samples.len() - 1);
        let (s0, s1) = (self.cumulative[i - 1], self.cumulative[i]);
        let f = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        self.samples[i - 1] + (self.samples[i] - self.samples[i - 1]) * f
    }

    /// Distance from `p` to the path and the arc length of the closest
    /// point, searching only segments that overlap `[s_lo, s_hi]`.
    pub fn project_within(&self, p: &Vector3<f64>, s_lo: f64, s_hi: f64) -> (f64, f64) {
        let first = self.cumulative.partition_point(|&c| c < s_lo).saturating_sub(1);
        let last = self.cumulative.partition_point(|&c| c <= s_hi).min(self.samples.len() - 1);
        let mut best = (f64::INFINITY, 0.0);
        for i in first..last.max(first + 1) {
            let (a, b) = (&self.samples[i], &self.samples[i + 1]);
            let t = segment_param(p, a, b);
            let d = (p - (a + (b - a) * t)).norm();
            if d < best.0 {
                best = (d, self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i]));
            }
        }
        best
    }

    /// Distance from `p` to the nearest point anywhere on the path.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.project_within(p, 0.0, self.length()).0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub mean: f64,
    pub max: f64,
    /// Contiguous runs of samples farther than the half-width from the path.
    pub excursions: usize,
    pub samples: usize,
}

pub fn deviation_metrics(traced: &[Vector3<f64>], reference: &SpiralReference) -> DeviationStats {
    let mut stats = DeviationStats {
        samples: traced.len(),
        ..DeviationStats::default()
    };
    if traced.is_empty() {
        return stats;
    }
    let mut sum = 0.0;
    let mut outside = false;
    for p in traced {
        let d = reference.distance(p);
        sum += d;
        stats.max = stats.max.max(d);
        let now_outside = d > reference.half_width;
        if now_outside && !outside {
            stats.excursions += 1;
        }
        outside = now_outside;
    }
    stats.mean = sum / traced.len() as f64;
    stats
}
