//! Dual digital-twin teleoperation simulator: arm kinematics, the compact
//! UDP pose protocol, a virtual-time network emulator, the synthetic RGB-D
//! scene, discrepancy detection, the twin-loop state machines and the
//! benchmark tasks built on them.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discrepancy;
pub mod kinematics;
pub mod netem;
pub mod scene;
pub mod tasks;
pub mod wire;
pub mod twinsync;
