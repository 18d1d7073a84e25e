//! Single owner of a live session: applies commands between ticks and
//! builds snapshots. Nothing here is shared; the server drives it from one
//! thread.

use std::collections::VecDeque;

use nalgebra::Vector3;
use twinloop::scene::SceneObject;
use twinloop::tasks::{Scenario, SpiralReference, TaskError, TaskKind};
use twinloop::twinsync::{NetworkConfig, Session, TrafficCounters, TwinState};

use crate::protocol::{
    shape_error, tally_rate, CommandError, ControlCommand, PlaceObject, RobotView, RollingMetrics, SessionInfo,
    StateSnapshot, TwinView, PROTOCOL_VERSION,
};

/// Snapshot clouds never carry more points than this.
pub const MAX_SNAPSHOT_POINTS: usize = 2000;
/// Ticks of counter history behind the rolling rates.
const RATE_WINDOW_TICKS: u64 = 1000;
/// First instance id handed out to objects placed without one.
const PLACED_INSTANCE_BASE: u32 = 10_000;

pub struct Controller {
    scenario: Scenario,
    session: Session,
    reference: Option<SpiralReference>,
    running: bool,
    resetting: bool,
    next_instance: u32,
    history: VecDeque<(u64, TrafficCounters)>,
}

fn twin_view(state: &TwinState) -> TwinView {
    TwinView {
        pose: state.pose,
        joints: state.joints.to_array(),
        objects: state.scene.clone(),
    }
}

impl Controller {
    /// Builds a paused session from `scenario`; the scenario's task is not
    /// scripted, the connected commander steers instead.
    pub fn new(scenario: Scenario) -> Result<Self, TaskError> {
        scenario.validate()?;
        let session = Self::build(&scenario)?;
        let reference = match scenario.task.kind {
            TaskKind::Spiral => Some(scenario.reference()?),
            _ => None,
        };
        let mut c = Self {
            scenario,
            session,
            reference,
            running: false,
            resetting: false,
            next_instance: PLACED_INSTANCE_BASE,
            history: VecDeque::new(),
        };
        c.record_counters();
        Ok(c)
    }

    fn build(scenario: &Scenario) -> Result<Session, TaskError> {
        let header = serde_json::to_value(scenario).expect("scenario serializes");
        Ok(Session::with_header(scenario.session.clone(), header)?)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn is_resetting(&self) -> bool {
        self.resetting
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            scenario: self.scenario.name.clone(),
            fence: self.scenario.session.fence,
            reference: self
                .reference
                .as_ref()
                .map(|r| r.samples.iter().map(|p| [p.x, p.y, p.z]).collect()),
            half_width: self.reference.as_ref().map(|r| r.half_width),
        }
    }

    /// Validates and applies one command. Rejected commands leave the
    /// session untouched.
    pub fn apply(&mut self, cmd: ControlCommand) -> Result<(), CommandError> {
        if self.resetting {
            return Err(CommandError::Busy);
        }
        match cmd {
            ControlCommand::StylusMove(m) => {
                let p = Vector3::from(m.position);
                if !p.iter().all(|c| c.is_finite()) {
                    return Err(CommandError::invalid("position", "coordinates must be finite"));
                }
                let sample = self.session.sample_now(p, m.closed);
                self.session.write_haptic(sample);
            }
            ControlCommand::SetScale(s) => self.session.set_scale(s.mode),
            ControlCommand::SetNetem(n) => {
                let cur = self.session.config().network;
                let next = NetworkConfig {
                    rtt: n.rtt.unwrap_or(cur.rtt),
                    jitter: n.jitter.unwrap_or(cur.jitter),
                    loss: n.loss.unwrap_or(cur.loss),
                    reorder: n.reorder.unwrap_or(cur.reorder),
                };
                if !(next.rtt.is_finite() && next.rtt >= 0.0) {
                    return Err(CommandError::invalid("rtt", "must be finite and >= 0"));
                }
                if !(next.jitter.is_finite() && next.jitter >= 0.0) {
                    return Err(CommandError::invalid("jitter", "must be finite and >= 0"));
                }
                if !(0.0..=1.0).contains(&next.loss) {
                    return Err(CommandError::invalid("loss", "must be in [0, 1]"));
                }
                self.session
                    .set_network(next)
                    .map_err(|e| CommandError::invalid(".", e.to_string()))?;
            }
            ControlCommand::PlaceObject(p) => {
                let object = self.object_for(&p)?;
                self.session
                    .place_object(object)
                    .map_err(|e| CommandError::invalid("shape", e.to_string()))?;
                if p.instance.is_none() {
                    self.next_instance += 1;
                }
            }
            ControlCommand::RemoveObject(r) => {
                if !self.session.remove_object(r.instance) {
                    return Err(CommandError::invalid("instance", format!("no object {}", r.instance)));
                }
            }
            ControlCommand::Start => self.running = true,
            ControlCommand::Pause => self.running = false,
            // Takes effect at the next tick boundary; until then the
            // session refuses commands.
            ControlCommand::Reset => self.resetting = true,
        }
        Ok(())
    }

    fn object_for(&self, p: &PlaceObject) -> Result<SceneObject, CommandError> {
        let position = Vector3::from(p.position);
        if !position.iter().all(|c| c.is_finite()) {
            return Err(CommandError::invalid("position", "coordinates must be finite"));
        }
        let instance_id = p.instance.unwrap_or(self.next_instance);
        let mut object = match (p.class, p.shape) {
            (_, Some(shape)) => {
                if let Some((path, msg)) = shape_error(&shape) {
                    return Err(CommandError::invalid(path, msg));
                }
                SceneObject {
                    instance_id,
                    class_id: p.class.unwrap_or(0),
                    shape: shape.with_centroid(position),
                    color: [90, 60, 40],
                }
            }
            (Some(class), None) => self
                .scenario
                .session
                .scene
                .registry
                .instantiate(class, instance_id, position)
                .ok_or_else(|| CommandError::invalid("class", format!("class {class} is not registered")))?,
            (None, None) => return Err(CommandError::invalid("shape", "needs a registered class or a shape")),
        };
        if let Some(color) = p.color {
            object.color = color;
        }
        Ok(object)
    }

    /// Completes a pending reset, then advances one tick if running.
    /// Returns whether a tick was simulated.
    pub fn advance(&mut self) -> Result<bool, TaskError> {
        if self.resetting {
            self.session = Self::build(&self.scenario)?;
            self.history.clear();
            self.next_instance = PLACED_INSTANCE_BASE;
            self.running = false;
            self.resetting = false;
            self.record_counters();
            return Ok(false);
        }
        if !self.running {
            return Ok(false);
        }
        self.session.step()?;
        self.record_counters();
        Ok(true)
    }

    fn record_counters(&mut self) {
        let tick = self.session.tick();
        self.history.push_back((tick, *self.session.counters()));
        while self.history.front().is_some_and(|(t, _)| tick - t > RATE_WINDOW_TICKS) {
            self.history.pop_front();
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let s = &self.session;
        let dt1 = s.dt1();
        let robot_pose = s.robot_pose();
        let cloud = dt1.state.clouds.last().map(|c| c.decimated(MAX_SNAPSHOT_POINTS));
        let force = s.force();
        StateSnapshot {
            v: PROTOCOL_VERSION,
            tick: s.tick(),
            time: s.time(),
            running: self.running,
            scale: s.scale(),
            scale_factor: s.scale().factor(),
            dt1: twin_view(&dt1.state),
            dt2: twin_view(&s.dt2().state),
            robot: RobotView {
                pose: robot_pose,
                joints: s.robot().joints.to_array(),
            },
            force: [force.force.x, force.force.y, force.force.z],
            force_magnitude: force.magnitude(),
            vetoed: dt1.vetoed,
            netem: s.config().network,
            fence: s.config().fence,
            cloud: cloud
                .as_ref()
                .map(|c| c.points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect())
                .unwrap_or_default(),
            cloud_total: dt1.state.clouds.last().map_or(0, |c| c.len()),
            metrics: self.rolling_metrics(&robot_pose.position),
        }
    }

    fn rolling_metrics(&self, robot: &Vector3<f64>) -> RollingMetrics {
        let (now_tick, now) = self.history.back().copied().unwrap_or_default();
        let (then_tick, then) = self.history.front().copied().unwrap_or_default();
        let ticks = now_tick - then_tick;
        let (pose_bytes_per_s, pose_packets_per_s) = tally_rate(&now.pose, &then.pose, ticks);
        let stats = self.session.dt2().stats;
        let audit = self.session.audit();
        RollingMetrics {
            window: ticks as f64 / 1000.0,
            pose_bytes_per_s,
            pose_packets_per_s,
            object_bytes_per_s: tally_rate(&now.object, &then.object, ticks).0,
            cloud_bytes_per_s: tally_rate(&now.cloud, &then.cloud, ticks).0,
            command_bytes_per_s: tally_rate(&now.command, &then.command, ticks).0,
            path_deviation: self.reference.as_ref().map(|r| r.distance(robot)),
            dt2_vetoed: stats.vetoed,
            dt2_stale: stats.stale,
            decode_errors: stats.decode_errors,
            robot_outside: audit.outside,
            max_violation: audit.max_violation,
        }
    }
}
