//! Deterministic stand-in for the human operator: a pursuit controller that
//! steers the stylus toward a point a fixed arc length ahead on the
//! reference, as seen through whatever feedback it is given.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::spiral::SpiralReference;

/// What the operator watches while steering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Perception {
    /// The local twin's tool tip, with no network delay.
    #[default]
    Twin,
    /// A video feed of the real robot, delayed by half the round trip plus one frame.
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorModel {
    /// Pursuit gain, 1/s.
    pub gain: f64,
    /// Hand speed cap, m/s.
    pub speed: f64,
    /// Arc length between the perceived tip and the pursued point, meters.
    pub lookahead: f64,
    pub tremor_amplitude: f64,
    pub tremor_hz: f64,
    pub perception: Perception,
    /// The task counts as finished once progress is this close to the end, meters.
    pub end_tolerance: f64,
}

impl Default for OperatorModel {
    fn default() -> Self {
        Self {
            gain: 20.0,
            speed: 0.025,
            lookahead: 0.0012,
            tremor_amplitude: 0.0,
            tremor_hz: 10.0,
            perception: Perception::Twin,
            end_tolerance: 0.0005,
        }
    }
}

impl OperatorModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gain > 0.0 && self.speed > 0.0 && self.lookahead > 0.0) {
            return Err("operator gain, speed and lookahead must be positive".into());
        }
        if !(self.tremor_amplitude >= 0.0 && self.tremor_hz >= 0.0 && self.end_tolerance > 0.0) {
            return Err("operator tremor must be >= 0 and end_tolerance > 0".into());
        }
        Ok(())
    }
}

/// Operator state while tracing one reference.
#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    pub model: OperatorModel,
    hand: Vector3<f64>,
    progress: f64,
    tremor_dir: Vector3<f64>,
    done: bool,
}

impl ScriptedOperator {
    /// `home` is the stylus starting position; `seed` fixes the tremor direction.
    pub fn new(model: OperatorModel, home: Vector3<f64>, seed: u64) -> Self {
        let phase = (seed % 360) as f64 / 360.0 * TAU;
        Self {
            model,
            hand: home,
            progress: 0.0,
            tremor_dir: Vector3::new(phase.cos(), phase.sin(), 0.0),
            done: false,
        }
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Updates from the perceived tool tip (robot frame) and returns the
    /// stylus position for time `t`.
    pub fn step(&mut self, reference: &SpiralReference, perceived: &Vector3<f64>, t: f64, dt: f64) -> Vector3<f64> {
        let m = &self.model;
        // Search a short window around the current progress so a stray tip
        // never snaps onto a neighboring turn.
        let (_, s) = reference.project_within(perceived, self.progress - 0.005, self.progress + 0.02);
        self.progress = self.progress.max(s);
        if self.progress >= reference.length() - m.end_tolerance {
            self.done = true;
        }
        if !self.done {
            let carrot = reference.point_at(self.progress + m.lookahead);
            let mut v = (carrot - perceived) * m.gain;
            let n = v.norm();
            if n > m.speed {
                v *= m.speed / n;
            }
            self.hand += v * dt;
        }
        self.hand + self.tremor_dir * (m.tremor_amplitude * (TAU * m.tremor_hz * t).sin())
    }
}
