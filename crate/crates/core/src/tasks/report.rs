//! Offline summary of a trace file: per-channel traffic recomputed from
//! `tx` records, vetoes, decode errors and a fence audit of every recorded
//! robot position.

use nalgebra::Vector3;
use serde::Serialize;

use super::{Scenario, TaskMetrics};
use crate::twinsync::trace::{Channel, Side, TraceEvent};
use crate::twinsync::{ChannelTally, Geofence, SessionConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub seed: Option<u64>,
    pub scenario_name: Option<String>,
    pub pose: ChannelTally,
    pub object: ChannelTally,
    pub cloud: ChannelTally,
    pub command: ChannelTally,
    pub injected: ChannelTally,
    pub dt1_vetoes: u64,
    pub dt2_vetoes: u64,
    pub rx_errors: u64,
    pub states: u64,
    /// `state` records whose robot position lies outside the fence.
    pub robot_outside: u64,
    pub max_violation: f64,
    pub last_t_us: u64,
    pub complete: Option<bool>,
    /// Metrics from the `end` record, when present.
    pub metrics: Option<TaskMetrics>,
}

impl TraceSummary {
    /// Checks that the traffic tallied from `tx` records equals the
    /// counters reported in the `end` record.
    pub fn accounting_matches(&self) -> Option<bool> {
        let m = self.metrics.as_ref()?;
        Some(self.pose == m.pose && self.object == m.object && self.cloud == m.cloud && self.command == m.command)
    }
}

/// Fence recorded in the header: a full scenario or a bare session config.
fn header_fence(scenario: &serde_json::Value) -> Option<Geofence> {
    if let Ok(s) = serde_json::from_value::<Scenario>(scenario.clone()) {
        return Some(s.session.fence);
    }
    serde_json::from_value::<SessionConfig>(scenario.clone()).ok().map(|c| c.fence)
}

pub fn summarize_trace(events: &[TraceEvent]) -> TraceSummary {
    let mut s = TraceSummary::default();
    let mut fence = None;
    for ev in events {
        match ev {
            TraceEvent::Header { seed, scenario, .. } => {
                s.seed = Some(*seed);
                s.scenario_name = scenario.get("name").and_then(|n| n.as_str()).map(str::to_owned);
                fence = header_fence(scenario);
            }
            TraceEvent::Tx {
                t_us, kind, len, dropped, ..
            } => {
                let tally = match kind {
                    Channel::Pose => &mut s.pose,
                    Channel::Object => &mut s.object,
                    Channel::Cloud => &mut s.cloud,
                    Channel::Command => &mut s.command,
                    Channel::Injected => &mut s.injected,
                };
                tally.packets += 1;
                tally.bytes += *len as u64;
                tally.dropped += *dropped as u64;
                s.last_t_us = s.last_t_us.max(*t_us);
            }
            TraceEvent::RxError { t_us, .. } => {
                s.rx_errors += 1;
                s.last_t_us = s.last_t_us.max(*t_us);
            }
            TraceEvent::Veto { t_us, at, .. } => {
                match at {
                    Side::Dt1 => s.dt1_vetoes += 1,
                    Side::Dt2 => s.dt2_vetoes += 1,
                }
                s.last_t_us = s.last_t_us.max(*t_us);
            }
            TraceEvent::State { t_us, robot, .. } => {
                s.states += 1;
                if let Some(f) = &fence {
                    let v = f.violation(&Vector3::from(*robot));
                    if v > 1e-9 {
                        s.robot_outside += 1;
                    }
                    s.max_violation = s.max_violation.max(v);
                }
                s.last_t_us = s.last_t_us.max(*t_us);
            }
            TraceEvent::Sync { t_us, .. } | TraceEvent::Control { t_us, .. } => {
                s.last_t_us = s.last_t_us.max(*t_us);
            }
            TraceEvent::End {
                t_us,
                complete,
                metrics,
            } => {
                s.complete = Some(*complete);
                s.metrics = serde_json::from_value(metrics.clone()).ok();
                s.last_t_us = s.last_t_us.max(*t_us);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{run_episode, TaskKind};
    use crate::twinsync::trace::parse_trace;

    #[test]
    fn summary_matches_episode_counters() {
        let mut sc = Scenario::default();
        sc.task.kind = TaskKind::Hold;
        sc.task.duration = 0.5;
        let ep = run_episode(&sc).unwrap();
        let events = parse_trace(&ep.trace.text()).unwrap();
        let s = summarize_trace(&events);
        assert_eq!(s.seed, Some(1));
        assert_eq!(s.scenario_name.as_deref(), Some("unnamed"));
        assert_eq!(s.pose.packets, 500);
        assert_eq!(s.accounting_matches(), Some(true));
        assert_eq!(s.complete, Some(true));
        assert_eq!(s.states, 50);
        assert_eq!(s.robot_outside, 0);
    }
}
