//! JSON message schema spoken over the WebSocket. Every message is one
//! text frame holding an object with a `v` (schema version) and a `type`.
//!
//! Client to server (`ControlCommand`):
//!
//! | `type` | fields |
//! |--------|--------|
//! | `stylus_move` | `position` `[x, y, z]` (operator frame, m), `closed` (bool, default false) |
//! | `set_scale` | `mode`: `macro` / `normal` / `micro` |
//! | `set_netem` | `rtt`, `jitter` (s), `loss` (0..1), `reorder` (bool); omitted fields keep their value |
//! | `place_object` | `position` `[x, y, z]`, and `class` (registry id) or `shape`; optional `instance`, `color` |
//! | `remove_object` | `instance` |
//! | `start` / `pause` / `reset` | none |
//!
//! Server to client (`ServerMessage`): `hello` on connect, `ack` or `error`
//! per command, and `snapshot` at the publication rate.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use twinloop::kinematics::Pose;
use twinloop::scene::{SceneObject, Shape};
use twinloop::twinsync::{ChannelTally, Geofence, NetworkConfig, ScaleMode};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylusMove {
    pub position: [f64; 3],
    #[serde(default)]
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetScale {
    pub mode: ScaleMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetNetem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceObject {
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoveObject {
    pub instance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlCommand {
    StylusMove(StylusMove),
    SetScale(SetScale),
    SetNetem(SetNetem),
    PlaceObject(PlaceObject),
    RemoveObject(RemoveObject),
    Start,
    Pause,
    Reset,
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::StylusMove(_) => "stylus_move",
            ControlCommand::SetScale(_) => "set_scale",
            ControlCommand::SetNetem(_) => "set_netem",
            ControlCommand::PlaceObject(_) => "place_object",
            ControlCommand::RemoveObject(_) => "remove_object",
            ControlCommand::Start => "start",
            ControlCommand::Pause => "pause",
            ControlCommand::Reset => "reset",
        }
    }

    /// The command as a versioned wire message.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("commands serialize");
        v.as_object_mut()
            .expect("tagged enum serializes to an object")
            .insert("v".into(), PROTOCOL_VERSION.into());
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    /// The message does not match the schema; `path` locates the offending field.
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported protocol version {0}")]
    Version(u64),
    /// Well-formed but not applicable (bad geometry, out-of-range value, ...).
    #[error("invalid command at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("session is resetting")]
    Busy,
    #[error("this connection is not the commander")]
    NotCommander,
}

impl CommandError {
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Schema { .. } => "schema",
            CommandError::Version(_) => "version",
            CommandError::Invalid { .. } => "invalid",
            CommandError::Busy => "busy",
            CommandError::NotCommander => "not_commander",
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            CommandError::Schema { path, .. } | CommandError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }

    pub(crate) fn invalid(path: &str, message: impl Into<String>) -> Self {
        CommandError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        CommandError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn payload<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, CommandError> {
    serde_path_to_error::deserialize(body).map_err(|e| {
        let path = e.path().to_string();
        CommandError::schema(path, e.into_inner().to_string())
    })
}

/// Parses and schema-checks one client message.
pub fn parse_command(text: &str) -> Result<ControlCommand, CommandError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CommandError::schema(".", e.to_string()))?;
    let Value::Object(mut body) = value else {
        return Err(CommandError::schema(".", "expected a JSON object"));
    };
    match body.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(PROTOCOL_VERSION as u64) => {}
        Some(Value::Number(n)) => return Err(CommandError::Version(n.as_u64().unwrap_or(0))),
        Some(_) => return Err(CommandError::schema("v", "expected an unsigned integer")),
        None => return Err(CommandError::schema("v", "missing field `v`")),
    }
    let kind = match body.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(CommandError::schema("type", "expected a string")),
        None => return Err(CommandError::schema("type", "missing field `type`")),
    };
    let body = Value::Object(body);
    let no_fields = |body: &Value| match body.as_object().and_then(|m| m.keys().next()) {
        Some(k) => Err(CommandError::schema(k.as_str(), format!("unknown field `{k}`"))),
        None => Ok(()),
    };
    Ok(match kind.as_str() {
        "stylus_move" => ControlCommand::StylusMove(payload(body)?),
        "set_scale" => ControlCommand::SetScale(payload(body)?),
        "set_netem" => ControlCommand::SetNetem(payload(body)?),
        "place_object" => ControlCommand::PlaceObject(payload(body)?),
        "remove_object" => ControlCommand::RemoveObject(payload(body)?),
        "start" => no_fields(&body).map(|_| ControlCommand::Start)?,
        "pause" => no_fields(&body).map(|_| ControlCommand::Pause)?,
        "reset" => no_fields(&body).map(|_| ControlCommand::Reset)?,
        other => return Err(CommandError::schema("type", format!("unknown command type `{other}`"))),
    })
}

/// Path of the first invalid dimension of `shape`, if any.
pub(crate) fn shape_error(shape: &Shape) -> Option<(&'static str, &'static str)> {
    let positive = |x: f64| x.is_finite() && x > 0.0;
    let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
    match shape {
        Shape::Sphere { center, radius } => {
            if !positive(*radius) {
                Some(("shape.radius", "radius must be positive"))
            } else if !finite(center) {
                Some(("shape.center", "center must be finite"))
            } else {
                None
            }
        }
        Shape::Box { center, half_extents } => {
            if !half_extents.iter().all(|&h| positive(h)) {
                Some(("shape.half_extents", "half extents must be positive"))
            } else if !finite(center) {
                Some(("shape.center", "center must be finite"))
            } else {
                None
            }
        }
        Shape::Cylinder { base, radius, height } => {
            if !positive(*radius) {
                Some(("shape.radius", "radius must be positive"))
            } else if !positive(*height) {
                Some(("shape.height", "height must be positive"))
            } else if !finite(base) {
                Some(("shape.base", "base must be finite"))
            } else {
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinView {
    pub pose: Pose,
    pub joints: [f64; 3],
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotView {
    pub pose: Pose,
    pub joints: [f64; 3],
}

/// Traffic rates over the last second of virtual time, plus counters that
/// only move when something is rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RollingMetrics {
    /// Seconds of history the rates are computed over.
    pub window: f64,
    pub pose_bytes_per_s: f64,
    pub pose_packets_per_s: f64,
    pub object_bytes_per_s: f64,
    pub cloud_bytes_per_s: f64,
    pub command_bytes_per_s: f64,
    /// Distance from the robot tip to the task's reference path, when there is one.
    pub path_deviation: Option<f64>,
    /// Pose datagrams DT2 vetoed, discarded as stale or failed to decode.
    pub dt2_vetoed: u64,
    pub dt2_stale: u64,
    pub decode_errors: u64,
    /// Executed robot poses outside the fence, and the largest violation.
    pub robot_outside: u64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub v: u32,
    pub tick: u64,
    /// Virtual time, seconds.
    pub time: f64,
    pub running: bool,
    pub scale: ScaleMode,
    pub scale_factor: f64,
    pub dt1: TwinView,
    pub dt2: TwinView,
    pub robot: RobotView,
    pub force: [f64; 3],
    pub force_magnitude: f64,
    pub vetoed: bool,
    pub netem: NetworkConfig,
    pub fence: Geofence,
    /// Latest complete discrepancy cloud shown in DT1, decimated.
    pub cloud: Vec<[f32; 3]>,
    pub cloud_total: usize,
    pub metrics: RollingMetrics,
}

/// Static scenario facts sent once per connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub scenario: String,
    pub fence: Geofence,
    pub reference: Option<Vec<[f64; 3]>>,
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Commander,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        v: u32,
        role: Role,
        info: SessionInfo,
    },
    Ack {
        v: u32,
        command: String,
        tick: u64,
    },
    Error {
        v: u32,
        code: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
        message: String,
    },
    Snapshot(Box<StateSnapshot>),
}

impl ServerMessage {
    pub fn error(e: &CommandError) -> Self {
        ServerMessage::Error {
            v: PROTOCOL_VERSION,
            code: e.code().into(),
            path: e.path().map(str::to_owned),
            message: e.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

/// Bytes and packets per second between two counter samples `ticks` apart.
pub(crate) fn tally_rate(now: &ChannelTally, then: &ChannelTally, ticks: u64) -> (f64, f64) {
    if ticks == 0 {
        return (0.0, 0.0);
    }
    let bytes = (now.bytes - then.bytes) as f64 * 1000.0 / ticks as f64;
    let packets = (now.packets - then.packets) as f64 * 1000.0 / ticks as f64;
    (bytes, packets)
}
