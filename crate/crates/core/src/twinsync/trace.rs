//! Line-delimited JSON event log. Every line is one object with an `ev`
//! discriminator; times are virtual microseconds (`t_us`).
//!
//! | `ev` | fields |
//! |------|--------|
//! | `header` | `v` (format version), `seed`, `scenario` (full configuration) |
//! | `tx` | `t_us`, `link` (`up`/`down`/`cmd`), `kind` (`pose`/`object`/`cloud`/`command`/`injected`), `seq`, `len` (bytes), `dropped` |
//! | `rx_error` | `t_us`, `link`, `error` |
//! | `veto` | `t_us`, `at` (`dt1`/`dt2`), `position` |
//! | `state` | `t_us`, `dt1`, `dt2`, `robot` (tip positions), `robot_q` (joints), `force`, `scale` |
//! | `sync` | `t_us`, `detections`, `known`, `cloud_points` |
//! | `control` | `t_us`, `command` (description of a runtime change) |
//! | `end` | `t_us`, `complete`, `metrics` |

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::ScaleMode;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkId {
    Up,
    Down,
    Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Pose,
    Object,
    Cloud,
    Command,
    /// Bytes placed on the uplink from outside the operator twin.
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Dt1,
    Dt2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        v: u32,
        seed: u64,
        scenario: serde_json::Value,
    },
    Tx {
        t_us: u64,
        link: LinkId,
        kind: Channel,
        seq: u32,
        len: usize,
        dropped: bool,
    },
    RxError {
        t_us: u64,
        link: LinkId,
        error: String,
    },
    Veto {
        t_us: u64,
        at: Side,
        position: [f64; 3],
    },
    State {
        t_us: u64,
        dt1: [f64; 3],
        dt2: [f64; 3],
        robot: [f64; 3],
        robot_q: [f64; 3],
        force: [f64; 3],
        scale: ScaleMode,
    },
    Sync {
        t_us: u64,
        detections: usize,
        known: usize,
        cloud_points: usize,
    },
    Control {
        t_us: u64,
        command: String,
    },
    End {
        t_us: u64,
        complete: bool,
        metrics: serde_json::Value,
    },
}

/// In-memory trace; disabled logs drop every event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    enabled: bool,
    lines: Vec<String>,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            lines: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, event: &TraceEvent) {
        if self.enabled {
            self.lines.push(serde_json::to_string(event).expect("trace events serialize"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn text(&self) -> String {
        let mut out = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for l in &self.lines {
            w.write_all(l.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Parses a trace file, reporting the first malformed line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}
