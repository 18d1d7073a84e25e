//! Scripted evaluation tasks: scenario files, the spiral-tracing episode,
//! hold and keyframe episodes, and the metrics they produce.
//!
//! A scenario is a TOML file with three tables:
//!
//! ```toml
//! name = "spiral-micro"
//!
//! [session]          # SessionConfig: seed, scale, network, sensing, scene, trace, ...
//! seed = 7
//! scale = "micro"
//! network = { rtt = 0.1 }
//!
//! [task]
//! kind = "spiral"    # "spiral" | "hold" | "script"
//! timeout = 120.0    # spiral: give up after this many seconds
//! duration = 20.0    # hold/script: episode length, seconds
//! spiral = { max_radius = 0.06, turns = 3.0, samples_per_turn = 200, half_width = 0.002 }
//! operator = { gain = 20.0, speed = 0.025, lookahead = 0.0012, perception = "twin" }
//!
//! [video]            # conventional video streaming used for comparison
//! frame_rate = 25.0
//! packets_per_frame = 35
//! packet_size = 1500
//! ```
//!
//! Script tasks list stylus keyframes (operator frame, linearly
//! interpolated) and optional forged pose datagrams placed directly on the
//! uplink:
//!
//! ```toml
//! [[task.keyframes]]
//! t = 1.0
//! position = [0.0, 0.0, 0.05]
//! closed = false
//!
//! [[task.forged]]
//! t = 2.0
//! position = [0.60, 0.0, 0.05]   # robot frame
//! seq_ahead = 0                  # 0 = the sequence number DT1 will use next
//! ```

mod operator;
pub mod report;
mod spiral;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use operator::{OperatorModel, Perception, ScriptedOperator};
pub use spiral::{deviation_metrics, spiral_reference, DeviationStats, SpiralParams, SpiralReference};

use crate::kinematics::Pose;
use crate::twinsync::trace::{TraceEvent, TraceLog};
use crate::twinsync::{ChannelTally, Dt2Stats, ExecutionAudit, Session, SessionConfig, TwinError, TICK_SECONDS};
use crate::wire::PoseDatagram;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Trace the spiral reference with the scripted operator.
    #[default]
    Spiral,
    /// Keep the stylus at home for `duration` seconds.
    Hold,
    /// Follow stylus keyframes for `duration` seconds.
    Script,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub position: Vector3<f64>,
    #[serde(default)]
    pub closed: bool,
}

/// Pose datagram injected on the uplink, bypassing DT1 and its checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgedDatagram {
    pub t: f64,
    pub position: Vector3<f64>,
    #[serde(default)]
    pub seq_ahead: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub timeout: f64,
    pub duration: f64,
    pub spiral: SpiralParams,
    pub operator: OperatorModel,
    pub keyframes: Vec<Keyframe>,
    pub forged: Vec<ForgedDatagram>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Spiral,
            timeout: 120.0,
            duration: 20.0,
            spiral: SpiralParams::default(),
            operator: OperatorModel::default(),
            keyframes: Vec::new(),
            forged: Vec::new(),
        }
    }
}

/// Conventional video streaming used as the bandwidth baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoEmulation {
    pub frame_rate: f64,
    pub packets_per_frame: u64,
    pub packet_size: u64,
}

impl Default for VideoEmulation {
    fn default() -> Self {
        Self {
            frame_rate: 25.0,
            packets_per_frame: 35,
            packet_size: 1500,
        }
    }
}

impl VideoEmulation {
    /// Frames streamed over `seconds`.
    pub fn frames(&self, seconds: f64) -> u64 {
        (seconds * self.frame_rate + 1e-9).floor() as u64
    }

    pub fn tally(&self, seconds: f64) -> ChannelTally {
        let packets = self.frames(seconds) * self.packets_per_frame;
        ChannelTally {
            packets,
            bytes: packets * self.packet_size,
            dropped: 0,
        }
    }

    /// Delay of a frame showing the remote site: half the round trip plus
    /// one frame interval.
    pub fn latency(&self, rtt: f64) -> f64 {
        rtt / 2.0 + 1.0 / self.frame_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub session: SessionConfig,
    pub task: TaskConfig,
    pub video: VideoEmulation,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "unnamed".into(),
            session: SessionConfig::default(),
            task: TaskConfig::default(),
            video: VideoEmulation::default(),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, TaskError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        self.session.validate()?;
        let t = &self.task;
        if !(t.timeout > 0.0 && t.duration > 0.0) {
            return Err(TaskError::Config("task timeout and duration must be positive".into()));
        }
        t.operator.validate().map_err(TaskError::Config)?;
        if !(self.video.frame_rate > 0.0) {
            return Err(TaskError::Config("video frame_rate must be positive".into()));
        }
        if t.keyframes.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(TaskError::Config("keyframes must be in time order".into()));
        }
        if t.kind == TaskKind::Spiral {
            self.reference()?;
        }
        Ok(())
    }

    /// The spiral centered on the robot home, checked against the fence.
    pub fn reference(&self) -> Result<SpiralReference, TaskError> {
        let p = &self.task.spiral;
        let r = spiral_reference(
            p.coefficient(),
            p.turns,
            p.samples_per_turn,
            self.session.robot_home,
            p.half_width,
        )?;
        let fence = self.session.fence;
        if let Some(p) = r.samples.iter().find(|p| !fence.contains(p, 0.0)) {
            return Err(TaskError::Config(format!(
                "spiral leaves the geofence at ({:.4}, {:.4}, {:.4})",
                p.x, p.y, p.z
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub complete: bool,
    /// Seconds until the operator finished (or the episode length).
    pub completion_time: f64,
    pub pose: ChannelTally,
    pub object: ChannelTally,
    pub cloud: ChannelTally,
    pub command: ChannelTally,
    /// What streaming video would have cost over the same time.
    pub video: ChannelTally,
    pub deviation: Option<DeviationStats>,
    pub max_force: f64,
    pub audit: ExecutionAudit,
    pub dt2: Dt2Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub video_packets: u64,
    pub video_bytes: u64,
    /// Object datagrams on the downlink.
    pub coordinate_packets: u64,
    pub coordinate_bytes: u64,
    /// Discrepancy-cloud traffic, reported separately.
    pub cloud_bytes: u64,
    pub packet_ratio: Option<f64>,
    pub byte_ratio: Option<f64>,
}

/// Video streaming cost over the episode against the object datagrams that
/// kept the operator's twin up to date.
pub fn bandwidth_report(metrics: &TaskMetrics, video: &VideoEmulation) -> BandwidthReport {
    let v = video.tally(metrics.completion_time);
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    BandwidthReport {
        video_packets: v.packets,
        video_bytes: v.bytes,
        coordinate_packets: metrics.object.packets,
        coordinate_bytes: metrics.object.bytes,
        cloud_bytes: metrics.cloud.bytes,
        packet_ratio: ratio(v.packets, metrics.object.packets),
        byte_ratio: ratio(v.bytes, metrics.object.bytes),
    }
}

pub struct Episode {
    pub metrics: TaskMetrics,
    pub trace: TraceLog,
    /// Robot tool-tip positions, one per tick (spiral tasks only).
    pub path: Vec<Vector3<f64>>,
}

fn interpolate_keyframes(keys: &[Keyframe], t: f64, home: Vector3<f64>) -> (Vector3<f64>, bool) {
    match keys.iter().position(|k| k.t > t) {
        None => keys.last().map_or((home, false), |k| (k.position, k.closed)),
        Some(0) => (home, false),
        Some(i) => {
            let (a, b) = (&keys[i - 1], &keys[i]);
            let f = (t - a.t) / (b.t - a.t);
            (a.position + (b.position - a.position) * f, a.closed)
        }
    }
}

/// Runs one scenario to completion (or timeout) and closes the trace with
/// an `end` record.
pub fn run_episode(scenario: &Scenario) -> Result<Episode, TaskError> {
    scenario.validate()?;
    let header = serde_json::to_value(scenario).expect("scenario serializes");
    let mut session = Session::with_header(scenario.session.clone(), header)?;
    let task = &scenario.task;
    let home = scenario.session.operator_home;
    let mut path = Vec::new();
    let mut max_force: f64 = 0.0;
    let mut complete = false;

    match task.kind {
        TaskKind::Spiral => {
            let reference = scenario.reference()?;
            let mut operator = ScriptedOperator::new(task.operator, home, scenario.session.seed);
            let delay = scenario.video.latency(scenario.session.network.rtt);
            let delay_ticks = (delay / TICK_SECONDS).round() as usize;
            let limit = (task.timeout / TICK_SECONDS).round() as u64;
            path.push(session.robot_pose().position);
            while session.tick() < limit {
                let perceived = match task.operator.perception {
                    Perception::Twin => session.dt1().state.pose.position,
                    Perception::Video => path[path.len().saturating_sub(1 + delay_ticks)],
                };
                let stylus = operator.step(&reference, &perceived, session.time(), TICK_SECONDS);
                if operator.is_done() {
                    complete = true;
                    break;
                }
                let sample = session.sample_now(stylus, false);
                session.write_haptic(sample);
                session.step()?;
                max_force = max_force.max(session.force().magnitude());
                path.push(session.robot_pose().position);
            }
        }
        TaskKind::Hold | TaskKind::Script => {
            let mut forged = task.forged.clone();
            forged.sort_by(|a, b| a.t.total_cmp(&b.t));
            let mut next_forged = 0;
            let limit = (task.duration / TICK_SECONDS).round() as u64;
            while session.tick() < limit {
                let t = session.time();
                while next_forged < forged.len() && forged[next_forged].t <= t + 1e-12 {
                    let f = &forged[next_forged];
                    let seq = session.dt1().next_seq().wrapping_add(f.seq_ahead);
                    let d = PoseDatagram::from_pose(&Pose::new(f.position, 1.0, false), seq, session.tick() * 1000);
                    session.inject_uplink(d.encode().to_vec());
                    next_forged += 1;
                }
                let (position, closed) = match task.kind {
                    TaskKind::Script => interpolate_keyframes(&task.keyframes, t, home),
                    _ => (home, false),
                };
                let sample = session.sample_now(position, closed);
                session.write_haptic(sample);
                session.step()?;
                max_force = max_force.max(session.force().magnitude());
            }
            complete = true;
        }
    }

    let elapsed = session.time();
    let counters = *session.counters();
    let metrics = TaskMetrics {
        complete,
        completion_time: elapsed,
        pose: counters.pose,
        object: counters.object,
        cloud: counters.cloud,
        command: counters.command,
        video: scenario.video.tally(elapsed),
        deviation: (task.kind == TaskKind::Spiral).then(|| {
            let reference = scenario.reference().expect("validated above");
            deviation_metrics(&path, &reference)
        }),
        max_force,
        audit: *session.audit(),
        dt2: session.dt2().stats,
    };
    let t_us = session.tick() * 1000;
    session.trace_mut().push(&TraceEvent::End {
        t_us,
        complete,
        metrics: serde_json::to_value(metrics).expect("metrics serialize"),
    });
    let trace = session.trace().clone();
    Ok(Episode { metrics, trace, path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twinsync::TraceConfig;

    fn quiet(mut s: Scenario) -> Scenario {
        s.session.trace = TraceConfig {
            enabled: false,
            ..TraceConfig::default()
        };
        s
    }

    #[test]
    fn scenario_toml_round_trip_and_defaults() {
        let s = Scenario::parse(
            r#"
            name = "t"
            [session]
            seed = 9
            scale = "micro"
            network = { rtt = 0.05 }
            [task]
            kind = "hold"
            duration = 2.0
            "#,
        )
        .unwrap();
        assert_eq!(s.session.seed, 9);
        assert_eq!(s.session.network.rtt, 0.05);
        assert_eq!(s.task.kind, TaskKind::Hold);
        assert_eq!(s.video, VideoEmulation::default());
        let text = toml::to_string(&s).unwrap();
        assert_eq!(Scenario::parse(&text).unwrap(), s);
    }

    #[test]
    fn spiral_outside_fence_is_rejected() {
        let mut s = Scenario::default();
        s.task.spiral.max_radius = 0.2;
        assert!(matches!(s.validate(), Err(TaskError::Config(_))));
    }

    #[test]
    fn unknown_task_kind_fails_to_parse() {
        assert!(matches!(
            Scenario::parse("[task]\nkind = \"juggle\"\n"),
            Err(TaskError::Parse(_))
        ));
    }

    #[test]
    fn video_tally_counts_whole_frames() {
        let v = VideoEmulation::default();
        let t = v.tally(20.0);
        assert_eq!(t.packets, 17_500);
        assert_eq!(t.bytes, 17_500 * 1500);
        assert_eq!(v.frames(0.039), 0);
        assert!((v.latency(0.1) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn keyframes_interpolate_linearly() {
        let keys = [
            Keyframe { t: 1.0, position: Vector3::new(0.0, 0.0, 0.0), closed: false },
            Keyframe { t: 3.0, position: Vector3::new(0.02, 0.0, 0.0), closed: true },
        ];
        let home = Vector3::new(0.0, 0.0, 0.01);
        assert_eq!(interpolate_keyframes(&keys, 0.5, home), (home, false));
        let (p, _) = interpolate_keyframes(&keys, 2.0, home);
        assert!((p.x - 0.01).abs() < 1e-15);
        assert_eq!(interpolate_keyframes(&keys, 5.0, home), (keys[1].position, true));
    }

    #[test]
    fn bandwidth_ratios_from_counts() {
        let mut m = TaskMetrics {
            completion_time: 20.0,
            ..TaskMetrics::default()
        };
        m.object = ChannelTally {
            packets: 600,
            bytes: 600 * 46,
            dropped: 0,
        };
        let r = bandwidth_report(&m, &VideoEmulation::default());
        assert_eq!((r.video_packets, r.video_bytes), (17_500, 26_250_000));
        assert!((r.packet_ratio.unwrap() - 17_500.0 / 600.0).abs() < 1e-12);
        assert!((r.byte_ratio.unwrap() - 26_250_000.0 / 27_600.0).abs() < 1e-9);
        m.object = ChannelTally::default();
        let r = bandwidth_report(&m, &VideoEmulation::default());
        assert_eq!((r.coordinate_bytes, r.byte_ratio), (0, None));
    }

    #[test]
    fn timeout_marks_episode_incomplete() {
        let mut s = quiet(Scenario::default());
        s.task.timeout = 0.5;
        let ep = run_episode(&s).unwrap();
        assert!(!ep.metrics.complete);
        assert!((ep.metrics.completion_time - 0.5).abs() < 1e-9);
    }

    #[test]
    fn hold_episode_counts_pose_traffic() {
        let mut s = quiet(Scenario::default());
        s.task.kind = TaskKind::Hold;
        s.task.duration = 1.0;
        let ep = run_episode(&s).unwrap();
        assert!(ep.metrics.complete);
        assert_eq!(ep.metrics.pose.packets, 1000);
        assert_eq!(ep.metrics.pose.bytes, 46_000);
        assert_eq!(ep.metrics.video.packets, 25 * 35);
        assert!(ep.metrics.deviation.is_none());
    }
}
