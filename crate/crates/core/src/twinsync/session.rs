//! Virtual-time scheduler that owns both twins, the real robot, the links
//! and the remote camera. One call to [`Session::step`] advances one 1 ms
//! tick; the haptic, pose-publication, command and sensing cadences are
//! integer divisions of it.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::trace::{Channel, LinkId, Side, TraceEvent, TraceLog, TRACE_VERSION};
use super::{
    dt1_step, dt2_ingest, real_robot_step, sync_environment, ContactParams, Dt1, Dt2, ForceFeedback, Geofence,
    HapticSample, LatestValue, LoopParams, MotionMapper, ScaleMode, TwinError, TwinState,
};
use crate::discrepancy::{detect_discrepancies, DiscrepancyParams};
use crate::kinematics::{calibrate, forward_kinematics, inverse_kinematics, ArmModel, JointVector, Pose};
use crate::netem::{Link, LinkConfig};
use crate::scene::{
    add_depth_noise, detect_known_objects, render_rgbd, robot_body, DetectorParams, SceneDescription, SceneObject,
    Shape,
};
use crate::wire::{decode, Message};

pub const TICK_SECONDS: f64 = 0.001;
const TICKS_PER_SECOND: u32 = 1000;
/// Links deliver anything due within this much of the current tick.
const DELIVERY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub haptic_hz: u32,
    /// DT1 pose datagrams per second.
    pub pose_hz: u32,
    /// Joint commands per second from DT2 to the robot.
    pub command_hz: u32,
    /// Camera frames (detection + discrepancy) per second.
    pub sensing_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            haptic_hz: 1000,
            pose_hz: 1000,
            command_hz: 100,
            sensing_hz: 10,
        }
    }
}

impl Rates {
    fn validate(&self) -> Result<(), TwinError> {
        for (name, hz) in [
            ("haptic_hz", self.haptic_hz),
            ("pose_hz", self.pose_hz),
            ("command_hz", self.command_hz),
            ("sensing_hz", self.sensing_hz),
        ] {
            if hz == 0 || hz > TICKS_PER_SECOND || !TICKS_PER_SECOND.is_multiple_of(hz) {
                return Err(TwinError::InvalidConfig(format!("{name} must divide 1000 (got {hz})")));
            }
        }
        Ok(())
    }

    fn period(hz: u32) -> u64 {
        (TICKS_PER_SECOND / hz) as u64
    }
}

/// Operator-to-remote network conditions; both directions get the same
/// delay, jitter and loss with independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Round-trip time, seconds.
    pub rtt: f64,
    /// Half-normal jitter standard deviation per direction, seconds.
    pub jitter: f64,
    pub loss: f64,
    pub reorder: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            rtt: 0.001,
            jitter: 0.0,
            loss: 0.0,
            reorder: false,
        }
    }
}

impl NetworkConfig {
    fn link(&self, seed: u64) -> LinkConfig {
        LinkConfig {
            one_way_delay: self.rtt / 2.0,
            jitter_stddev: self.jitter,
            loss_probability: self.loss,
            seed,
            reorder_allowed: self.reorder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    pub enabled: bool,
    /// Depth noise `sigma = depth_noise * depth^2`.
    pub depth_noise: f64,
    pub dropout: f64,
    pub confidence_gate: f64,
    pub detector: DetectorParams,
    pub discrepancy: DiscrepancyParams,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            depth_noise: 0.0025,
            dropout: 0.0,
            confidence_gate: 0.9,
            detector: DetectorParams::default(),
            discrepancy: DiscrepancyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub enabled: bool,
    /// Ticks between `state` records; 0 disables them.
    pub state_every: u64,
    /// Record every datagram handed to a link.
    pub datagrams: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            state_every: 10,
            datagrams: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    pub arm: ArmModel,
    pub fence: Geofence,
    pub contact: ContactParams,
    pub scale: ScaleMode,
    pub operator_home: Vector3<f64>,
    pub robot_home: Vector3<f64>,
    pub rates: Rates,
    pub network: NetworkConfig,
    /// Loss probability on the DT2-to-robot command bus.
    pub command_loss: f64,
    /// DT2 clamps targets this far inside the fence before execution, meters.
    pub execution_guard: f64,
    /// Cartesian speed limit of DT2's published waypoints, m/s.
    pub max_tool_speed: f64,
    pub sensing: SensingConfig,
    /// Objects modeled in both twins from the start (and present in reality).
    pub environment: Vec<SceneObject>,
    /// Camera, registry and the real-only objects the twins must discover.
    pub scene: SceneDescription,
    pub trace: TraceConfig,
}

pub fn default_table() -> SceneObject {
    SceneObject {
        instance_id: 1,
        class_id: 0,
        shape: Shape::Box {
            center: Vector3::new(0.30, 0.0, -0.025),
            half_extents: Vector3::new(0.5, 0.5, 0.025),
        },
        color: [200, 200, 200],
    }
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            arm: ArmModel::default(),
            fence: Geofence::default(),
            contact: ContactParams::default(),
            scale: ScaleMode::Normal,
            operator_home: Vector3::zeros(),
            robot_home: Vector3::new(0.30, 0.0, 0.0),
            rates: Rates::default(),
            network: NetworkConfig::default(),
            command_loss: 0.0,
            execution_guard: 0.002,
            max_tool_speed: 0.2,
            sensing: SensingConfig::default(),
            environment: vec![default_table()],
            scene: SceneDescription::default(),
            trace: TraceConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), TwinError> {
        self.arm.validate()?;
        self.fence.validate_against(&self.arm)?;
        self.rates.validate()?;
        self.network.link(0).validate()?;
        self.scene.validate()?;
        for o in &self.environment {
            o.validate()?;
        }
        if !(0.0..=1.0).contains(&self.command_loss) {
            return Err(TwinError::InvalidConfig("command_loss must be in [0, 1]".into()));
        }
        if !(self.execution_guard >= 0.0 && self.max_tool_speed > 0.0) {
            return Err(TwinError::InvalidConfig(
                "execution_guard must be >= 0 and max_tool_speed > 0".into(),
            ));
        }
        if !(self.contact.stiffness >= 0.0 && self.contact.cap >= 0.0) {
            return Err(TwinError::InvalidConfig("contact stiffness and cap must be >= 0".into()));
        }
        if !self.fence.contains(&self.robot_home, 0.0) {
            return Err(TwinError::InvalidConfig("robot home must lie inside the geofence".into()));
        }
        Ok(())
    }
}

/// Packets and bytes handed to a link on one channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTally {
    pub packets: u64,
    pub bytes: u64,
    pub dropped: u64,
}

impl ChannelTally {
    fn add(&mut self, len: usize, dropped: bool) {
        self.packets += 1;
        self.bytes += len as u64;
        self.dropped += dropped as u64;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub pose: ChannelTally,
    pub object: ChannelTally,
    pub cloud: ChannelTally,
    pub command: ChannelTally,
    pub injected: ChannelTally,
}

/// Executed robot poses checked against the fence after every tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionAudit {
    pub executed: u64,
    pub outside: u64,
    pub max_violation: f64,
}

/// The simulated physical arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealRobot {
    pub joints: JointVector,
    pub command: Option<JointVector>,
}

impl RealRobot {
    pub fn step(&mut self, dt: f64, model: &ArmModel) {
        self.joints = real_robot_step(&self.joints, self.command.as_ref(), dt, model);
    }
}

fn encode_command(q: &JointVector) -> Vec<u8> {
    q.to_array().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_command(bytes: &[u8]) -> Option<JointVector> {
    if bytes.len() != 24 {
        return None;
    }
    let mut q = [0.0; 3];
    for (i, c) in bytes.chunks_exact(8).enumerate() {
        q[i] = f64::from_le_bytes(c.try_into().ok()?);
    }
    Some(JointVector::from_array(q))
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub struct Session {
    config: SessionConfig,
    tick: u64,
    dt1: Dt1,
    dt2: Dt2,
    robot: RealRobot,
    haptic: LatestValue<HapticSample>,
    uplink: Link,
    downlink: Link,
    command_link: Link,
    command_seq: u32,
    world: Vec<SceneObject>,
    counters: TrafficCounters,
    audit: ExecutionAudit,
    trace: TraceLog,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self, TwinError> {
        let scenario = serde_json::to_value(&config).expect("config serializes");
        Self::with_header(config, scenario)
    }

    /// Like [`Session::new`], recording `scenario` in the trace header
    /// instead of the bare session configuration.
    pub fn with_header(config: SessionConfig, scenario: serde_json::Value) -> Result<Self, TwinError> {
        config.validate()?;
        let model = config.arm;
        let home = Pose::new(config.robot_home, 1.0, false);
        let q_home = inverse_kinematics(&model, &home)?;
        let calibration = calibrate(&Pose::new(config.operator_home, 1.0, false), &home);
        let mapper = MotionMapper::new(calibration, config.operator_home, config.scale);
        let dt1 = Dt1::new(
            TwinState::new(&model, q_home, config.environment.clone())?,
            mapper,
            &config.contact,
        );
        let dt2 = Dt2::new(
            TwinState::new(&model, q_home, config.environment.clone())?,
            config.execution_guard,
            config.max_tool_speed,
        );
        let seed = config.seed;
        let uplink = Link::new(config.network.link(seed ^ 0x7570))?;
        let downlink = Link::new(config.network.link(seed ^ 0x646f))?;
        let command_link = Link::new(LinkConfig {
            loss_probability: config.command_loss,
            seed: seed ^ 0x636d,
            ..LinkConfig::default()
        })?;
        let mut trace = TraceLog::new(config.trace.enabled);
        trace.push(&TraceEvent::Header {
            v: TRACE_VERSION,
            seed,
            scenario,
        });
        Ok(Self {
            world: config.scene.objects.clone(),
            config,
            tick: 0,
            dt1,
            dt2,
            robot: RealRobot {
                joints: q_home,
                command: None,
            },
            haptic: LatestValue::default(),
            uplink,
            downlink,
            command_link,
            command_seq: 0,
            counters: TrafficCounters::default(),
            audit: ExecutionAudit::default(),
            trace,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Virtual time of the next tick, seconds.
    pub fn time(&self) -> f64 {
        self.tick as f64 * TICK_SECONDS
    }

    fn t_us(&self) -> u64 {
        self.tick * 1000
    }

    pub fn dt1(&self) -> &Dt1 {
        &self.dt1
    }

    pub fn dt2(&self) -> &Dt2 {
        &self.dt2
    }

    pub fn robot(&self) -> &RealRobot {
        &self.robot
    }

    pub fn robot_pose(&self) -> Pose {
        let p = self.config.arm.tip(&self.robot.joints);
        Pose::new(p, self.dt2.state.pose.aperture, self.dt2.state.pose.closed)
    }

    pub fn force(&self) -> ForceFeedback {
        self.dt1.force
    }

    pub fn counters(&self) -> &TrafficCounters {
        &self.counters
    }

    pub fn audit(&self) -> &ExecutionAudit {
        &self.audit
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceLog {
        &mut self.trace
    }

    pub fn world(&self) -> &[SceneObject] {
        &self.world
    }

    pub fn scale(&self) -> ScaleMode {
        self.dt1.mapper.mode
    }

    /// Places a stylus reading in the haptic register, overwriting any
    /// unread one.
    pub fn write_haptic(&mut self, sample: HapticSample) {
        self.haptic.write(sample);
    }

    /// Stylus reading stamped with the current tick.
    pub fn sample_now(&self, position: Vector3<f64>, closed: bool) -> HapticSample {
        HapticSample {
            index: self.tick,
            t: self.time(),
            position,
            closed,
        }
    }

    pub fn set_scale(&mut self, mode: ScaleMode) {
        self.dt1.set_mode(mode);
        self.config.scale = mode;
        let t_us = self.t_us();
        self.trace.push(&TraceEvent::Control {
            t_us,
            command: format!("scale {}", mode.name()),
        });
    }

    /// Replaces delay, jitter and loss on both directions. Datagrams
    /// already in flight keep their delivery times.
    pub fn set_network(&mut self, network: NetworkConfig) -> Result<(), TwinError> {
        let seed = self.config.seed ^ self.tick.wrapping_mul(0x9e37_79b9);
        let up = network.link(seed ^ 0x7570);
        let down = network.link(seed ^ 0x646f);
        up.validate()?;
        self.uplink.reconfigure(up)?;
        self.downlink.reconfigure(down)?;
        self.config.network = network;
        let t_us = self.t_us();
        self.trace.push(&TraceEvent::Control {
            t_us,
            command: format!(
                "network rtt={} jitter={} loss={} reorder={}",
                network.rtt, network.jitter, network.loss, network.reorder
            ),
        });
        Ok(())
    }

    /// Adds (or replaces, by instance id) an object in the real environment.
    pub fn place_object(&mut self, object: SceneObject) -> Result<(), TwinError> {
        object.validate()?;
        match self.world.iter_mut().find(|o| o.instance_id == object.instance_id) {
            Some(existing) => *existing = object,
            None => self.world.push(object),
        }
        let t_us = self.t_us();
        self.trace.push(&TraceEvent::Control {
            t_us,
            command: format!("place {}", object.instance_id),
        });
        Ok(())
    }

    pub fn remove_object(&mut self, instance_id: u32) -> bool {
        let before = self.world.len();
        self.world.retain(|o| o.instance_id != instance_id);
        let removed = self.world.len() != before;
        if removed {
            let t_us = self.t_us();
            self.trace.push(&TraceEvent::Control {
                t_us,
                command: format!("remove {instance_id}"),
            });
        }
        removed
    }

    /// Puts raw bytes on the uplink as if they had arrived from the network.
    pub fn inject_uplink(&mut self, bytes: Vec<u8>) {
        let now = self.time();
        let len = bytes.len();
        let sent = self.uplink.submit(bytes, now);
        self.counters.injected.add(len, sent.dropped);
        self.trace_tx(LinkId::Up, Channel::Injected, u32::MAX, len, sent.dropped);
    }

    fn trace_tx(&mut self, link: LinkId, kind: Channel, seq: u32, len: usize, dropped: bool) {
        if self.config.trace.datagrams {
            let t_us = self.t_us();
            self.trace.push(&TraceEvent::Tx {
                t_us,
                link,
                kind,
                seq,
                len,
                dropped,
            });
        }
    }

    fn send_pose(&mut self, d: crate::wire::PoseDatagram) {
        let bytes = d.encode().to_vec();
        let len = bytes.len();
        let sent = self.uplink.submit(bytes, self.time());
        self.counters.pose.add(len, sent.dropped);
        self.trace_tx(LinkId::Up, Channel::Pose, d.seq, len, sent.dropped);
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), TwinError> {
        let now = self.time();
        let t_us = self.t_us();
        let rates = self.config.rates;
        let model = self.config.arm;
        let fence = self.config.fence;
        let contact = self.config.contact;
        let params = LoopParams {
            model: &model,
            fence: &fence,
            contact: &contact,
        };
        let publish = self.tick.is_multiple_of(Rates::period(rates.pose_hz));

        // Loop 1: stylus to DT1, immediate force feedback.
        let mut published = false;
        if self.tick.is_multiple_of(Rates::period(rates.haptic_hz)) {
            if let Some(sample) = self.haptic.take_new() {
                let out = dt1_step(&mut self.dt1, &sample, &params, publish.then_some(t_us))?;
                if out.vetoed {
                    self.trace.push(&TraceEvent::Veto {
                        t_us,
                        at: Side::Dt1,
                        position: arr(&out.target.position),
                    });
                }
                if let Some(d) = out.datagram {
                    self.send_pose(d);
                }
                published = true;
            }
        }
        if publish && !published {
            if let Some(d) = self.dt1.publish(t_us) {
                self.send_pose(d);
            }
        }

        // Loop 2, uplink: pose datagrams into DT2.
        for d in self.uplink.drain(now + DELIVERY_SLACK) {
            match decode(&d.payload) {
                Ok(Message::Pose(p)) => {
                    let vetoes = self.dt2.stats.vetoed;
                    dt2_ingest(&mut self.dt2, &p, &params)?;
                    if self.dt2.stats.vetoed > vetoes {
                        let v = p.to_pose().position;
                        self.trace.push(&TraceEvent::Veto {
                            t_us,
                            at: Side::Dt2,
                            position: arr(&v),
                        });
                    }
                }
                Ok(other) => {
                    self.dt2.record_decode_error();
                    self.trace.push(&TraceEvent::RxError {
                        t_us,
                        link: LinkId::Up,
                        error: format!("unexpected {:?} datagram", other.kind()),
                    });
                }
                Err(e) => {
                    self.dt2.record_decode_error();
                    self.trace.push(&TraceEvent::RxError {
                        t_us,
                        link: LinkId::Up,
                        error: e.to_string(),
                    });
                }
            }
        }

        // DT2 republishes the latest target as joint commands at its own cadence.
        let command_period = Rates::period(rates.command_hz);
        if self.tick.is_multiple_of(command_period) && self.dt2.target().is_some() {
            let q = self.dt2.command_tick(&model, command_period as f64 * TICK_SECONDS, t_us)?;
            let bytes = encode_command(&q);
            let len = bytes.len();
            let sent = self.command_link.submit(bytes, now);
            self.counters.command.add(len, sent.dropped);
            let seq = self.command_seq;
            self.command_seq = self.command_seq.wrapping_add(1);
            self.trace_tx(LinkId::Cmd, Channel::Command, seq, len, sent.dropped);
        }
        for d in self.command_link.drain(now + DELIVERY_SLACK) {
            if let Some(q) = decode_command(&d.payload) {
                self.robot.command = Some(q);
            }
        }

        self.robot.step(TICK_SECONDS, &model);
        let executed = model.tip(&self.robot.joints);
        self.audit.executed += 1;
        let violation = fence.violation(&executed);
        if violation > 1e-9 {
            self.audit.outside += 1;
        }
        self.audit.max_violation = self.audit.max_violation.max(violation);

        if self.config.sensing.enabled && self.tick.is_multiple_of(Rates::period(rates.sensing_hz)) {
            self.sense(t_us)?;
        }

        // Downlink: known objects and clouds into DT1.
        for d in self.downlink.drain(now + DELIVERY_SLACK) {
            match decode(&d.payload) {
                Ok(Message::Object(o)) => {
                    self.dt1.apply_object(&o, &self.config.scene.registry, t_us);
                }
                Ok(Message::CloudChunk(c)) => {
                    self.dt1.apply_cloud_chunk(c, t_us);
                }
                Ok(Message::Pose(_)) => {}
                Err(e) => self.trace.push(&TraceEvent::RxError {
                    t_us,
                    link: LinkId::Down,
                    error: e.to_string(),
                }),
            }
        }

        let every = self.config.trace.state_every;
        if every > 0 && self.tick.is_multiple_of(every) {
            self.trace_state(t_us);
        }
        self.tick += 1;
        Ok(())
    }

    pub fn run_ticks(&mut self, n: u64) -> Result<(), TwinError> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    fn trace_state(&mut self, t_us: u64) {
        let robot = self.config.arm.tip(&self.robot.joints);
        self.trace.push(&TraceEvent::State {
            t_us,
            dt1: arr(&self.dt1.state.pose.position),
            dt2: arr(&self.dt2.state.pose.position),
            robot: arr(&robot),
            robot_q: self.robot.joints.to_array(),
            force: arr(&self.dt1.force.force),
            scale: self.dt1.mapper.mode,
        });
    }

    /// Real objects as the camera sees them, robot body included.
    pub fn real_scene(&self) -> Vec<SceneObject> {
        let mut objects = self.config.environment.clone();
        objects.extend(self.world.iter().copied());
        objects.extend(robot_body(&self.config.arm, &self.robot.joints));
        objects
    }

    fn sense(&mut self, t_us: u64) -> Result<(), TwinError> {
        let sensing = self.config.sensing;
        let scene = &self.config.scene;
        let cam = &scene.camera;
        let frame_seed = self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ self.tick;

        let real_objects = self.real_scene();
        let mut real = add_depth_noise(
            &render_rgbd(&real_objects, cam, scene.background),
            sensing.depth_noise,
            sensing.dropout,
            frame_seed,
        );
        real.timestamp_us = t_us;
        let detections = detect_known_objects(
            &real,
            &real_objects,
            cam,
            &scene.registry,
            &sensing.detector,
            frame_seed ^ 0xde7,
        );
        // Confident detections are placed in DT2 before its frame is rendered,
        // so only the unexplained remainder shows up as discrepancy.
        for d in detections.iter().filter(|d| d.confidence >= sensing.confidence_gate) {
            if let Some(obj) = scene.registry.instantiate(d.class_id, d.instance_id, d.position) {
                self.dt2.state.upsert_object(obj, t_us);
            }
        }
        let mut synthetic_objects = self.dt2.state.scene.clone();
        synthetic_objects.extend(robot_body(&self.config.arm, &self.robot.joints));
        let synthetic = render_rgbd(&synthetic_objects, cam, scene.background);
        let cloud = detect_discrepancies(&real, &synthetic, cam, &sensing.discrepancy)?;

        let out = sync_environment(
            &mut self.dt2,
            &detections,
            &cloud,
            &self.config.scene.registry,
            sensing.confidence_gate,
            t_us,
        );
        self.trace.push(&TraceEvent::Sync {
            t_us,
            detections: detections.len(),
            known: out.known,
            cloud_points: cloud.len(),
        });
        let now = self.time();
        for o in out.objects {
            let bytes = o.encode().to_vec();
            let len = bytes.len();
            let sent = self.downlink.submit(bytes, now);
            self.counters.object.add(len, sent.dropped);
            self.trace_tx(LinkId::Down, Channel::Object, o.seq, len, sent.dropped);
        }
        for c in out.cloud_chunks {
            let bytes = c.encode()?;
            let len = bytes.len();
            let sent = self.downlink.submit(bytes, now);
            self.counters.cloud.add(len, sent.dropped);
            self.trace_tx(LinkId::Down, Channel::Cloud, c.seq, len, sent.dropped);
        }
        Ok(())
    }

    /// DT1's pose recomputed from its joints (consistency check helper).
    pub fn dt1_pose_from_joints(&self) -> Result<Pose, TwinError> {
        Ok(forward_kinematics(&self.config.arm, &self.dt1.state.joints, &self.dt1.state.pose)?)
    }
}
