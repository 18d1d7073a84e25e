//! Live session service: runs one twinloop session in virtual time paced
//! to the wall clock, streams state snapshots to any number of WebSocket
//! observers and accepts control commands from a single commander.

mod controller;
pub mod protocol;
mod server;

pub use controller::{Controller, MAX_SNAPSHOT_POINTS};
pub use protocol::{parse_command, CommandError, ControlCommand, ServerMessage, StateSnapshot, PROTOCOL_VERSION};
pub use server::{spawn, GatewayConfig, GatewayHandle};
