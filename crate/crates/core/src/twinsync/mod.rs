//! Twin-loop state machines.
//!
//! Loop 1 couples the operator's stylus to the operator-side twin (DT1):
//! motion scaling, calibration, geofence clamp, inverse kinematics and
//! contact force, all without touching the network. Loop 2 carries DT1's
//! pose over the emulated link to the remote twin (DT2), which re-checks the
//! fence and commands the real robot, and carries known-object coordinates
//! and discrepancy clouds back.

mod session;
pub mod trace;

use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discrepancy::{DiscrepancyCloud, DiscrepancyError};
use crate::kinematics::{
    forward_kinematics, inverse_kinematics_clamped, interpolate_step, ArmModel, CalibrationTransform, JointVector,
    KinematicsError, Pose,
};
use crate::netem::NetemError;
use crate::scene::{Detection, ObjectRegistry, SceneError, SceneObject};
use crate::wire::{chunk_cloud, reassemble_cloud, CloudChunkDatagram, ObjectDatagram, PoseDatagram, WireError};

pub use session::{
    default_table, ChannelTally, ExecutionAudit, NetworkConfig, Rates, RealRobot, SensingConfig, Session,
    SessionConfig, TraceConfig, TrafficCounters, TICK_SECONDS,
};

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Discrepancy(#[from] DiscrepancyError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Haptic-to-robot displacement ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Macro,
    #[default]
    Normal,
    Micro,
}

impl ScaleMode {
    pub const ALL: [ScaleMode; 3] = [ScaleMode::Macro, ScaleMode::Normal, ScaleMode::Micro];

    /// Haptic millimeters per robot millimeter.
    pub fn factor(self) -> f64 {
        match self {
            ScaleMode::Macro => 0.7,
            ScaleMode::Normal => 1.0,
            ScaleMode::Micro => 1.3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::Macro => "macro",
            ScaleMode::Normal => "normal",
            ScaleMode::Micro => "micro",
        }
    }
}

impl FromStr for ScaleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(ScaleMode::Macro),
            "normal" => Ok(ScaleMode::Normal),
            "micro" => Ok(ScaleMode::Micro),
            other => Err(format!("unknown scale mode {other:?} (expected macro, normal or micro)")),
        }
    }
}

/// Robot displacement (mm) produced by a stylus displacement (mm).
pub fn apply_motion_scale(haptic_delta_mm: &Vector3<f64>, mode: ScaleMode) -> Vector3<f64> {
    haptic_delta_mm / mode.factor()
}

/// One reading of the operator's stylus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapticSample {
    pub index: u64,
    /// Seconds.
    pub t: f64,
    /// Stylus tip in the operator frame, meters.
    pub position: Vector3<f64>,
    /// Gripper button held closed.
    pub closed: bool,
}

/// Single-slot cell: writers overwrite, the reader sees only the newest value.
#[derive(Debug, Clone)]
pub struct LatestValue<T> {
    slot: Option<T>,
    written: u64,
    read: u64,
}

impl<T> Default for LatestValue<T> {
    fn default() -> Self {
        Self {
            slot: None,
            written: 0,
            read: 0,
        }
    }
}

impl<T: Clone> LatestValue<T> {
    pub fn write(&mut self, value: T) {
        self.slot = Some(value);
        self.written += 1;
    }

    /// The newest value if it has not been read yet.
    pub fn take_new(&mut self) -> Option<T> {
        if self.written == self.read {
            return None;
        }
        self.read = self.written;
        self.slot.clone()
    }

    pub fn peek(&self) -> Option<&T> {
        self.slot.as_ref()
    }

    /// Number of writes that were overwritten before being read.
    pub fn pending(&self) -> u64 {
        self.written - self.read
    }
}

/// Axis-aligned operating volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geofence {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Violations larger than this are vetoed rather than clamped, meters.
    pub margin: f64,
}

impl Default for Geofence {
    fn default() -> Self {
        Self {
            min: Vector3::new(0.15, -0.14, -0.02),
            max: Vector3::new(0.39, 0.14, 0.20),
            margin: 0.05,
        }
    }
}

impl Geofence {
    pub fn validate(&self) -> Result<(), TwinError> {
        let finite = self.min.iter().chain(self.max.iter()).all(|v| v.is_finite());
        if !finite || (0..3).any(|i| self.min[i] >= self.max[i]) {
            return Err(TwinError::InvalidConfig("geofence min must be below max on every axis".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(TwinError::InvalidConfig("geofence margin must be >= 0".into()));
        }
        Ok(())
    }

    /// Checks that every point of the box can be reached by the arm.
    pub fn validate_against(&self, model: &ArmModel) -> Result<(), TwinError> {
        self.validate()?;
        let shoulder = model.shoulder();
        for k in 0..8 {
            let corner = Vector3::new(
                if k & 1 == 0 { self.min.x } else { self.max.x },
                if k & 2 == 0 { self.min.y } else { self.max.y },
                if k & 4 == 0 { self.min.z } else { self.max.z },
            );
            if (corner - shoulder).norm() > model.max_reach() {
                return Err(TwinError::InvalidConfig(format!(
                    "geofence corner ({:.3}, {:.3}, {:.3}) is out of reach",
                    corner.x, corner.y, corner.z
                )));
            }
        }
        if (self.clamp(&shoulder) - shoulder).norm() <= model.min_reach() {
            return Err(TwinError::InvalidConfig("geofence reaches inside the arm's dead zone".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Euclidean distance from `p` to the box, zero inside.
    pub fn violation(&self, p: &Vector3<f64>) -> f64 {
        (p - self.clamp(p)).norm()
    }

    pub fn contains(&self, p: &Vector3<f64>, tolerance: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tolerance && p[i] <= self.max[i] + tolerance)
    }

    /// The same box pulled in by `inset` on every face.
    pub fn shrunk(&self, inset: f64) -> Geofence {
        let center = (self.min + self.max) / 2.0;
        let inset = Vector3::repeat(inset);
        Geofence {
            min: (self.min + inset).inf(&center),
            max: (self.max - inset).sup(&center),
            margin: self.margin,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }
}

/// Clamps `target` into the fence. The flag is set (and the pose must not be
/// forwarded) when the target lies farther outside than the fence margin, or
/// is not a valid pose at all.
pub fn safety_clamp(target: &Pose, fence: &Geofence) -> (Pose, bool) {
    if !target.position.iter().all(|v| v.is_finite()) {
        return (target.with_position(fence.center()), true);
    }
    let clamped = target.with_position(fence.clamp(&target.position));
    let clamped = Pose {
        aperture: if target.aperture.is_finite() { target.aperture.clamp(0.0, 1.0) } else { 0.0 },
        ..clamped
    };
    (clamped, fence.violation(&target.position) > fence.margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceFeedback {
    /// Newtons, robot frame.
    pub force: Vector3<f64>,
    pub cap: f64,
}

impl ForceFeedback {
    pub fn zero(cap: f64) -> Self {
        Self {
            force: Vector3::zeros(),
            cap,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.force.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactParams {
    /// N/m.
    pub stiffness: f64,
    /// N.
    pub cap: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 300.0,
            cap: 3.3,
        }
    }
}

/// Spring force on the tool tip from the deepest penetrated object,
/// along that object's outward normal. Robot-body primitives are ignored.
pub fn contact_force(scene: &[SceneObject], tip: &Vector3<f64>, stiffness: f64, cap: f64) -> ForceFeedback {
    let deepest = scene
        .iter()
        .filter(|o| !o.is_robot())
        .filter_map(|o| o.shape.penetration(tip))
        .fold(None::<(f64, Vector3<f64>)>, |best, (d, n)| match best {
            Some((b, _)) if b >= d => best,
            _ => Some((d, n)),
        });
    let Some((depth, normal)) = deepest else {
        return ForceFeedback::zero(cap);
    };
    let magnitude = (stiffness * depth).min(cap);
    ForceFeedback {
        force: normal * magnitude,
        cap,
    }
}

/// Maps stylus positions to robot targets. Scaling is applied to the
/// displacement from an anchor pair, re-anchored whenever the mode changes,
/// so the target depends only on the newest stylus position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionMapper {
    pub calibration: CalibrationTransform,
    pub mode: ScaleMode,
    anchor_stylus: Vector3<f64>,
    anchor_robot: Vector3<f64>,
}

impl MotionMapper {
    pub fn new(calibration: CalibrationTransform, operator_home: Vector3<f64>, mode: ScaleMode) -> Self {
        Self {
            calibration,
            mode,
            anchor_stylus: operator_home,
            anchor_robot: calibration.apply(&operator_home),
        }
    }

    pub fn target(&self, stylus: &Vector3<f64>) -> Vector3<f64> {
        let delta_mm = self.calibration.apply_vector(&(stylus - self.anchor_stylus)) * 1000.0;
        self.anchor_robot + apply_motion_scale(&delta_mm, self.mode) / 1000.0
    }

    /// Switches mode without moving the target under a still stylus.
    pub fn set_mode(&mut self, mode: ScaleMode, stylus: &Vector3<f64>) {
        self.anchor_robot = self.target(stylus);
        self.anchor_stylus = *stylus;
        self.mode = mode;
    }
}

/// Last update time of each channel, microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStamps {
    pub pose_us: u64,
    pub scene_us: u64,
    pub cloud_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub joints: JointVector,
    pub pose: Pose,
    pub scene: Vec<SceneObject>,
    pub clouds: Vec<DiscrepancyCloud>,
    pub stamps: ChannelStamps,
}

impl TwinState {
    pub fn new(model: &ArmModel, joints: JointVector, scene: Vec<SceneObject>) -> Result<Self, TwinError> {
        let pose = forward_kinematics(model, &joints, &Pose::at(0.0, 0.0, 0.0))?;
        Ok(Self {
            joints,
            pose,
            scene,
            clouds: Vec::new(),
            stamps: ChannelStamps::default(),
        })
    }

    /// Updates joints and the derived pose together.
    pub fn set_joints(&mut self, model: &ArmModel, joints: JointVector, gripper: &Pose, t_us: u64) -> Result<(), TwinError> {
        self.pose = forward_kinematics(model, &joints, gripper)?;
        self.joints = joints;
        self.stamps.pose_us = self.stamps.pose_us.max(t_us);
        Ok(())
    }

    pub fn upsert_object(&mut self, object: SceneObject, t_us: u64) {
        match self.scene.iter_mut().find(|o| o.instance_id == object.instance_id) {
            Some(existing) => *existing = object,
            None => self.scene.push(object),
        }
        self.stamps.scene_us = self.stamps.scene_us.max(t_us);
    }

    pub fn set_cloud(&mut self, cloud: DiscrepancyCloud, t_us: u64) {
        self.clouds.clear();
        if !cloud.is_empty() {
            self.clouds.push(cloud);
        }
        self.stamps.cloud_us = self.stamps.cloud_us.max(t_us);
    }
}

/// Operator-side twin.
#[derive(Debug, Clone)]
pub struct Dt1 {
    pub state: TwinState,
    pub mapper: MotionMapper,
    pub force: ForceFeedback,
    pub vetoed: bool,
    pub ik_clamped: bool,
    pub last_stylus: Option<Vector3<f64>>,
    seq: u32,
    assembler: CloudAssembler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dt1Output {
    /// Scaled, calibrated target before the fence clamp.
    pub target: Pose,
    pub vetoed: bool,
    pub force: ForceFeedback,
    pub datagram: Option<PoseDatagram>,
}

/// Shared per-session parameters of both loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams<'a> {
    pub model: &'a ArmModel,
    pub fence: &'a Geofence,
    pub contact: &'a ContactParams,
}

impl Dt1 {
    pub fn new(state: TwinState, mapper: MotionMapper, contact: &ContactParams) -> Self {
        Self {
            state,
            mapper,
            force: ForceFeedback::zero(contact.cap),
            vetoed: false,
            ik_clamped: false,
            last_stylus: None,
            seq: 0,
            assembler: CloudAssembler::default(),
        }
    }

    pub fn next_seq(&self) -> u32 {
        self.seq
    }

    /// Pose datagram for the current pose, or `None` while the latest
    /// target is vetoed.
    pub fn publish(&mut self, t_us: u64) -> Option<PoseDatagram> {
        if self.vetoed {
            return None;
        }
        let d = PoseDatagram::from_pose(&self.state.pose, self.seq, t_us);
        self.seq = self.seq.wrapping_add(1);
        Some(d)
    }

    pub fn set_mode(&mut self, mode: ScaleMode) {
        let stylus = self.last_stylus.unwrap_or(self.mapper.anchor_stylus);
        self.mapper.set_mode(mode, &stylus);
    }

    /// Applies an object datagram from the remote side. Unknown classes are ignored.
    pub fn apply_object(&mut self, d: &ObjectDatagram, registry: &ObjectRegistry, t_us: u64) -> bool {
        match registry.instantiate(d.class_id, d.instance_id, d.position_f64()) {
            Some(obj) => {
                self.state.upsert_object(obj, t_us);
                true
            }
            None => false,
        }
    }

    /// Collects a cloud chunk; a completed cloud replaces the displayed one.
    pub fn apply_cloud_chunk(&mut self, chunk: CloudChunkDatagram, t_us: u64) -> Option<usize> {
        let cloud = self.assembler.push(chunk)?;
        let n = cloud.len();
        self.state.set_cloud(cloud, t_us);
        Some(n)
    }
}

/// Target computation shared by [`dt1_step`] and latest-value checks.
pub fn dt1_target(mapper: &MotionMapper, sample: &HapticSample) -> Pose {
    let p = mapper.target(&sample.position);
    if sample.closed {
        Pose::new(p, 0.0, true)
    } else {
        Pose::new(p, 1.0, false)
    }
}

/// One Loop-1 update: stylus sample to DT1 joints, force feedback and
/// (when `publish_at` is given) the outgoing pose datagram.
pub fn dt1_step(
    dt1: &mut Dt1,
    sample: &HapticSample,
    params: &LoopParams,
    publish_at: Option<u64>,
) -> Result<Dt1Output, TwinError> {
    let t_us = (sample.t * 1e6).round() as u64;
    dt1.last_stylus = Some(sample.position);
    let target = dt1_target(&dt1.mapper, sample);
    let (clamped, veto) = safety_clamp(&target, params.fence);
    dt1.vetoed = veto;
    if !veto {
        let (q, moved) = inverse_kinematics_clamped(params.model, &clamped)?;
        dt1.ik_clamped = moved;
        dt1.state.set_joints(params.model, q, &clamped, t_us)?;
    }
    dt1.force = contact_force(
        &dt1.state.scene,
        &dt1.state.pose.position,
        params.contact.stiffness,
        params.contact.cap,
    );
    let datagram = publish_at.and_then(|t| dt1.publish(t));
    Ok(Dt1Output {
        target,
        vetoed: veto,
        force: dt1.force,
        datagram,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dt2Stats {
    pub accepted: u64,
    pub stale: u64,
    pub vetoed: u64,
    pub decode_errors: u64,
}

/// Remote-side twin and protective layer in front of the real robot.
#[derive(Debug, Clone)]
pub struct Dt2 {
    pub state: TwinState,
    pub stats: Dt2Stats,
    last_seq: Option<u32>,
    target: Option<Pose>,
    waypoint: Pose,
    /// Targets are clamped this far inside the fence before execution.
    pub guard: f64,
    /// Cartesian speed limit of the published waypoints, m/s.
    pub max_speed: f64,
    cloud_id: u16,
    cloud_shown: bool,
    object_seq: u32,
}

impl Dt2 {
    pub fn new(state: TwinState, guard: f64, max_speed: f64) -> Self {
        let waypoint = state.pose;
        Self {
            state,
            stats: Dt2Stats::default(),
            last_seq: None,
            target: None,
            waypoint,
            guard,
            max_speed,
            cloud_id: 0,
            cloud_shown: false,
            object_seq: 0,
        }
    }

    pub fn target(&self) -> Option<&Pose> {
        self.target.as_ref()
    }

    pub fn last_seq(&self) -> Option<u32> {
        self.last_seq
    }

    pub fn record_decode_error(&mut self) {
        self.stats.decode_errors += 1;
    }

    /// Advances the published waypoint toward the latest target by at most
    /// `max_speed * period` and returns the joint command for it.
    pub fn command_tick(&mut self, model: &ArmModel, period: f64, t_us: u64) -> Result<JointVector, TwinError> {
        if let Some(target) = self.target {
            let delta = target.position - self.waypoint.position;
            let max_step = self.max_speed * period;
            let step = if delta.norm() > max_step {
                delta * (max_step / delta.norm())
            } else {
                delta
            };
            self.waypoint = target.with_position(self.waypoint.position + step);
            let (q, _) = inverse_kinematics_clamped(model, &self.waypoint)?;
            self.state.set_joints(model, q, &self.waypoint, t_us)?;
        }
        Ok(self.state.joints)
    }
}

/// Accepts a decoded pose datagram at DT2: stale sequence numbers are
/// discarded, the fence is re-applied, and the new target's joint solution
/// is returned. The real robot is driven separately at the command cadence.
pub fn dt2_ingest(dt2: &mut Dt2, datagram: &PoseDatagram, params: &LoopParams) -> Result<Option<JointVector>, TwinError> {
    if dt2.last_seq.is_some_and(|last| datagram.seq <= last) {
        dt2.stats.stale += 1;
        return Ok(None);
    }
    dt2.last_seq = Some(datagram.seq);
    let pose = datagram.to_pose();
    let (_, veto) = safety_clamp(&pose, params.fence);
    if veto {
        dt2.stats.vetoed += 1;
        return Ok(None);
    }
    let (clamped, _) = safety_clamp(&pose, &params.fence.shrunk(dt2.guard));
    let (q, _) = inverse_kinematics_clamped(params.model, &clamped)?;
    dt2.target = Some(clamped);
    dt2.stats.accepted += 1;
    Ok(Some(q))
}

/// Advances the robot one control step toward its latest command (or holds
/// still without one).
pub fn real_robot_step(joints: &JointVector, command: Option<&JointVector>, dt: f64, model: &ArmModel) -> JointVector {
    match command {
        Some(target) => interpolate_step(joints, target, dt, model),
        None => *joints,
    }
}

/// Datagrams produced by one environment synchronization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncOutput {
    pub objects: Vec<ObjectDatagram>,
    pub cloud_chunks: Vec<CloudChunkDatagram>,
    /// Detections routed to the coordinate path.
    pub known: usize,
}

/// Known-object detections at or above `gate` update DT2's scene and are
/// sent as coordinates; everything else reaches DT1 as the discrepancy
/// cloud. A cloud is sent whenever it is nonempty, plus one empty cloud to
/// clear DT1's display when the discrepancy disappears.
pub fn sync_environment(
    dt2: &mut Dt2,
    detections: &[Detection],
    cloud: &DiscrepancyCloud,
    registry: &ObjectRegistry,
    gate: f64,
    t_us: u64,
) -> SyncOutput {
    let mut out = SyncOutput::default();
    for d in detections {
        if d.confidence < gate {
            continue;
        }
        let Some(obj) = registry.instantiate(d.class_id, d.instance_id, d.position) else {
            continue;
        };
        dt2.state.upsert_object(obj, t_us);
        let p = d.position;
        out.objects.push(ObjectDatagram {
            seq: dt2.object_seq,
            t_us,
            position: [p.x as f32, p.y as f32, p.z as f32],
            class_id: d.class_id,
            confidence: d.confidence as f32,
            instance_id: d.instance_id,
        });
        dt2.object_seq = dt2.object_seq.wrapping_add(1);
        out.known += 1;
    }
    if !cloud.is_empty() || dt2.cloud_shown {
        let stamped = DiscrepancyCloud {
            points: cloud.points.clone(),
            timestamp_us: t_us,
        };
        out.cloud_chunks = chunk_cloud(&stamped, dt2.cloud_id);
        dt2.cloud_id = dt2.cloud_id.wrapping_add(1);
        dt2.cloud_shown = !cloud.is_empty();
        dt2.state.set_cloud(stamped, t_us);
    }
    out
}

/// Collects chunks of the newest cloud id. Chunks of an older cloud arriving
/// late are dropped; an incomplete cloud is abandoned when a newer id shows up.
#[derive(Debug, Clone, Default)]
pub struct CloudAssembler {
    current: Option<u16>,
    chunks: Vec<CloudChunkDatagram>,
}

impl CloudAssembler {
    pub fn push(&mut self, chunk: CloudChunkDatagram) -> Option<DiscrepancyCloud> {
        match self.current {
            Some(id) if id == chunk.cloud_id => {}
            // Wrapping comparison: ids within half the range behind are old.
            Some(id) if chunk.cloud_id.wrapping_sub(id) > u16::MAX / 2 => return None,
            _ => {
                self.current = Some(chunk.cloud_id);
                self.chunks.clear();
            }
        }
        if self.chunks.iter().any(|c| c.chunk_index == chunk.chunk_index) {
            return None;
        }
        self.chunks.push(chunk);
        match reassemble_cloud(&self.chunks) {
            Ok((cloud, true)) => {
                self.chunks.clear();
                Some(cloud)
            }
            Ok((_, false)) => None,
            Err(_) => {
                self.chunks.clear();
                None
            }
        }
    }
}
