//! Forward/inverse kinematics for the 3-DOF stand-in arm (base yaw plus a
//! two-link planar shoulder/elbow chain), joint-space interpolation toward a
//! commanded target, and operator-to-robot pose calibration.
//!
//! Joint convention: `shoulder` and `elbow` are pitch angles measured upward
//! from the horizontal plane, so the tip of the planar chain sits at
//!
//! ```text
//! r = L2·cos(q2) + L3·cos(q2 + q3)
//! z = d1 + L2·sin(q2) + L3·sin(q2 + q3)
//! ```
//!
//! and the "elbow-down" branch is `elbow >= 0` (elbow below the line from
//! the shoulder to the tip).

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when deciding whether a target sits inside the reachable annulus.
const REACH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("joint {joint} = {value} outside limits [{min}, {max}]")]
    JointLimit {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("target at {distance:.4} m from the shoulder is outside the reachable annulus [{min:.4}, {max:.4}]")]
    Unreachable {
        distance: f64,
        min: f64,
        max: f64,
        /// Closest reachable pose along the ray from the shoulder.
        nearest: Pose,
    },
    #[error("invalid arm model: {0}")]
    InvalidModel(&'static str),
}

/// Joint-space state of the arm, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector {
    pub yaw: f64,
    pub shoulder: f64,
    pub elbow: f64,
}

impl JointVector {
    pub const fn new(yaw: f64, shoulder: f64, elbow: f64) -> Self {
        Self {
            yaw,
            shoulder,
            elbow,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.yaw, self.shoulder, self.elbow]
    }

    pub fn from_array(q: [f64; 3]) -> Self {
        Self::new(q[0], q[1], q[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Largest absolute per-joint difference.
    pub fn max_abs_diff(&self, other: &JointVector) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// End-effector state exchanged between the twins: tip position in the robot
/// base frame, gripper aperture fraction and the close/contact flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    /// Gripper aperture in `[0, 1]`.
    pub aperture: f64,
    pub closed: bool,
}

impl Pose {
    pub fn new(position: Vector3<f64>, aperture: f64, closed: bool) -> Self {
        Self {
            position,
            aperture,
            closed,
        }
    }

    /// Open gripper at `position`.
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), 1.0, false)
    }

    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&self.aperture)
    }

    pub fn with_position(mut self, position: Vector3<f64>) -> Self {
        self.position = position;
        self
    }
}

/// Geometry and limits of the arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmModel {
    /// Shoulder height above the base frame origin, meters.
    pub base_height: f64,
    /// Shoulder-to-elbow length, meters.
    pub upper_arm: f64,
    /// Elbow-to-tip length, meters.
    pub forearm: f64,
    /// Per-joint speed limit, rad/s.
    pub max_joint_speed: f64,
    pub joint_limits: [[f64; 2]; 3],
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            base_height: 0.1519,
            upper_arm: 0.2435,
            forearm: 0.2132,
            // The controller's rated limit, not π.
            #[allow(clippy::approx_constant)]
            max_joint_speed: 3.14,
            joint_limits: [[-PI, PI]; 3],
        }
    }
}

impl ArmModel {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.base_height > 0.0 && self.upper_arm > 0.0 && self.forearm > 0.0) {
            return Err(KinematicsError::InvalidModel("link dimensions must be positive"));
        }
        if self.upper_arm < self.forearm {
            return Err(KinematicsError::InvalidModel("upper arm must be at least as long as the forearm"));
        }
        if !(self.max_joint_speed > 0.0) {
            return Err(KinematicsError::InvalidModel("joint speed limit must be positive"));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(KinematicsError::InvalidModel("joint limits must satisfy min < max"));
        }
        Ok(())
    }

    pub fn shoulder(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.base_height)
    }

    pub fn max_reach(&self) -> f64 {
        self.upper_arm + self.forearm
    }

    pub fn min_reach(&self) -> f64 {
        (self.upper_arm - self.forearm).abs()
    }

    pub fn check_limits(&self, q: &JointVector) -> Result<(), KinematicsError> {
        if !q.is_finite() {
            return Err(KinematicsError::NonFinite("joint vector"));
        }
        for (joint, (value, [min, max])) in q.to_array().into_iter().zip(self.joint_limits).enumerate() {
            if value < min || value > max {
                return Err(KinematicsError::JointLimit {
                    joint,
                    value,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    /// Tip position without limit checks.
    pub fn tip(&self, q: &JointVector) -> Vector3<f64> {
        let outer = q.shoulder + q.elbow;
        let r = self.upper_arm * q.shoulder.cos() + self.forearm * outer.cos();
        let z = self.base_height + self.upper_arm * q.shoulder.sin() + self.forearm * outer.sin();
        Vector3::new(r * q.yaw.cos(), r * q.yaw.sin(), z)
    }

    /// Elbow joint position without limit checks.
    pub fn elbow_position(&self, q: &JointVector) -> Vector3<f64> {
        let r = self.upper_arm * q.shoulder.cos();
        let z = self.base_height + self.upper_arm * q.shoulder.sin();
        Vector3::new(r * q.yaw.cos(), r * q.yaw.sin(), z)
    }

    /// True when `p` lies inside the reachable shell around the shoulder.
    pub fn is_reachable(&self, p: &Vector3<f64>) -> bool {
        let d = (p - self.shoulder()).norm();
        d >= self.min_reach() - REACH_EPS && d <= self.max_reach() + REACH_EPS
    }
}

/// Tip pose for joint state `q`; gripper fields are copied from `gripper`.
pub fn forward_kinematics(model: &ArmModel, q: &JointVector, gripper: &Pose) -> Result<Pose, KinematicsError> {
    model.check_limits(q)?;
    Ok(Pose::new(model.tip(q), gripper.aperture, gripper.closed))
}

/// Closed-form elbow-down inverse kinematics.
pub fn inverse_kinematics(model: &ArmModel, target: &Pose) -> Result<JointVector, KinematicsError> {
    let p = target.position;
    if !p.iter().all(|v| v.is_finite()) {
        return Err(KinematicsError::NonFinite("target position"));
    }
    let r = p.x.hypot(p.y);
    let s = p.z - model.base_height;
    let distance = r.hypot(s);
    let (min, max) = (model.min_reach(), model.max_reach());
    if distance > max + REACH_EPS || distance < min - REACH_EPS {
        let nearest = nearest_reachable(model, target);
        return Err(KinematicsError::Unreachable {
            distance,
            min,
            max,
            nearest,
        });
    }
    let q = solve_planar(model, p.y.atan2(p.x), r, s);
    model.check_limits(&q)?;
    Ok(q)
}

/// Inverse kinematics that falls back to the nearest reachable pose.
/// Returns the joints and whether the target had to be moved.
pub fn inverse_kinematics_clamped(model: &ArmModel, target: &Pose) -> Result<(JointVector, bool), KinematicsError> {
    match inverse_kinematics(model, target) {
        Ok(q) => Ok((q, false)),
        Err(KinematicsError::Unreachable { nearest, .. }) => Ok((inverse_kinematics(model, &nearest)?, true)),
        Err(e) => Err(e),
    }
}

fn solve_planar(model: &ArmModel, yaw: f64, r: f64, s: f64) -> JointVector {
    let (l2, l3) = (model.upper_arm, model.forearm);
    let cos_elbow = ((r * r + s * s - l2 * l2 - l3 * l3) / (2.0 * l2 * l3)).clamp(-1.0, 1.0);
    let elbow = cos_elbow.acos();
    let shoulder = wrap_angle(s.atan2(r) - (l3 * elbow.sin()).atan2(l2 + l3 * elbow.cos()));
    JointVector::new(yaw, shoulder, elbow)
}

fn nearest_reachable(model: &ArmModel, target: &Pose) -> Pose {
    let p = target.position;
    let yaw = if p.x == 0.0 && p.y == 0.0 { 0.0 } else { p.y.atan2(p.x) };
    let r = p.x.hypot(p.y);
    let s = p.z - model.base_height;
    let distance = r.hypot(s);
    let radius = distance.clamp(model.min_reach(), model.max_reach());
    let (ur, us) = if distance > 0.0 { (r / distance, s / distance) } else { (1.0, 0.0) };
    let (nr, ns) = (ur * radius, us * radius);
    target.with_position(Vector3::new(nr * yaw.cos(), nr * yaw.sin(), model.base_height + ns))
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Moves each joint toward `target` by at most `max_joint_speed * dt`,
/// snapping exactly onto the target once it is within one step.
pub fn interpolate_step(current: &JointVector, target: &JointVector, dt: f64, model: &ArmModel) -> JointVector {
    debug_assert!(dt > 0.0, "interpolate_step requires dt > 0");
    let max_step = model.max_joint_speed * dt;
    let cur = current.to_array();
    let tgt = target.to_array();
    let mut out = [0.0; 3];
    for i in 0..3 {
        let delta = tgt[i] - cur[i];
        out[i] = if delta.abs() <= max_step {
            tgt[i]
        } else {
            cur[i] + max_step.copysign(delta)
        };
    }
    JointVector::from_array(out)
}

/// Rigid-plus-scale map from the operator device frame to the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTransform {
    pub translation: Vector3<f64>,
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    pub scale: f64,
}

impl Default for CalibrationTransform {
    fn default() -> Self {
        Self {
            translation: Vector3::zeros(),
            yaw: 0.0,
            scale: 1.0,
        }
    }
}

impl CalibrationTransform {
    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.apply_vector(p) + self.translation
    }

    /// Maps a displacement (no translation).
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (v * self.scale)
    }

    /// Inverse of [`apply_vector`](Self::apply_vector).
    pub fn invert_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse() * v / self.scale
    }
}

/// Transform that maps the stylus home position onto the robot home position
/// with zero orientation difference and unit scale.
pub fn calibrate(operator_home: &Pose, robot_home: &Pose) -> CalibrationTransform {
    CalibrationTransform {
        translation: robot_home.position - operator_home.position,
        yaw: 0.0,
        scale: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model() -> ArmModel {
        ArmModel::default()
    }

    fn gripper() -> Pose {
        Pose::at(0.0, 0.0, 0.0)
    }

    #[test]
    fn fk_zero_pose_is_fully_extended() {
        let p = forward_kinematics(&model(), &JointVector::default(), &gripper()).unwrap();
        assert_abs_diff_eq!(p.position, Vector3::new(0.4567, 0.0, 0.1519), epsilon = 1e-12);
    }

    #[test]
    fn fk_base_yaw_quarter_turn() {
        let p = forward_kinematics(&model(), &JointVector::new(PI / 2.0, 0.0, 0.0), &gripper()).unwrap();
        assert_abs_diff_eq!(p.position, Vector3::new(0.0, 0.4567, 0.1519), epsilon = 1e-12);
    }

    #[test]
    fn fk_vertical_shoulder_horizontal_forearm() {
        let p = forward_kinematics(&model(), &JointVector::new(0.0, PI / 2.0, -PI / 2.0), &gripper()).unwrap();
        assert_abs_diff_eq!(p.position, Vector3::new(0.2132, 0.0, 0.1519 + 0.2435), epsilon = 1e-12);
    }

    #[test]
    fn fk_passes_gripper_through() {
        let g = Pose::new(Vector3::zeros(), 0.25, true);
        let p = forward_kinematics(&model(), &JointVector::default(), &g).unwrap();
        assert_eq!((p.aperture, p.closed), (0.25, true));
    }

    #[test]
    fn fk_rejects_out_of_limit_joint() {
        let err = forward_kinematics(&model(), &JointVector::new(0.0, 4.0, 0.0), &gripper()).unwrap_err();
        assert!(matches!(err, KinematicsError::JointLimit { joint: 1, .. }));
    }

    #[test]
    fn ik_inverts_extended_pose() {
        let q = inverse_kinematics(&model(), &Pose::at(0.4567, 0.0, 0.1519)).unwrap();
        assert_abs_diff_eq!(q.yaw, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(q.shoulder, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(q.elbow, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn ik_unreachable_reports_nearest_pose_on_outer_shell() {
        let m = model();
        match inverse_kinematics(&m, &Pose::at(10.0, 0.0, 0.0)) {
            Err(KinematicsError::Unreachable { nearest, .. }) => {
                let d = (nearest.position - m.shoulder()).norm();
                assert_abs_diff_eq!(d, m.max_reach(), epsilon = 1e-12);
                assert!(nearest.position.x > 0.0);
            }
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn ik_inside_inner_hole_is_unreachable() {
        let m = model();
        let err = inverse_kinematics(&m, &Pose::at(0.01, 0.0, m.base_height)).unwrap_err();
        let KinematicsError::Unreachable { nearest, .. } = err else { panic!() };
        assert_abs_diff_eq!((nearest.position - m.shoulder()).norm(), m.min_reach(), epsilon = 1e-12);
    }

    #[test]
    fn clamped_ik_lands_on_nearest() {
        let m = model();
        let (q, clamped) = inverse_kinematics_clamped(&m, &Pose::at(1.0, 0.0, m.base_height)).unwrap();
        assert!(clamped);
        assert_abs_diff_eq!(m.tip(&q), Vector3::new(m.max_reach(), 0.0, m.base_height), epsilon = 1e-6);
    }

    #[test]
    fn interpolate_fixed_point() {
        let q = JointVector::new(0.1, 0.2, 0.3);
        assert_eq!(interpolate_step(&q, &q, 0.01, &model()), q);
    }

    #[test]
    fn interpolate_limited_step() {
        let m = ArmModel {
            max_joint_speed: 0.5,
            ..model()
        };
        let q = interpolate_step(&JointVector::default(), &JointVector::new(1.0, 0.0, 0.0), 0.01, &m);
        assert_abs_diff_eq!(q.yaw, 0.005, epsilon = 1e-15);
        assert_eq!((q.shoulder, q.elbow), (0.0, 0.0));
    }

    #[test]
    fn interpolate_snaps_within_one_step() {
        let m = ArmModel {
            max_joint_speed: 0.5,
            ..model()
        };
        let target = JointVector::new(1.0, 0.0, 0.0);
        let q = interpolate_step(&JointVector::new(0.999, 0.0, 0.0), &target, 0.01, &m);
        assert_eq!(q, target);
    }

    #[test]
    fn calibrate_identical_homes_is_identity() {
        let home = Pose::at(0.1, 0.2, 0.3);
        assert_eq!(calibrate(&home, &home), CalibrationTransform::default());
    }

    #[test]
    fn calibrate_pure_translation() {
        let t = calibrate(&Pose::at(0.0, 0.0, 0.0), &Pose::at(0.3, 0.0, 0.15));
        assert_eq!(t.translation, Vector3::new(0.3, 0.0, 0.15));
        assert_eq!(t.yaw, 0.0);
        assert_eq!(t.scale, 1.0);
    }

    #[test]
    fn calibrate_maps_home_onto_home() {
        let op = Pose::at(-0.02, 0.013, 0.071);
        let robot = Pose::at(0.3, -0.05, 0.12);
        let t = calibrate(&op, &robot);
        assert!((t.apply(&op.position) - robot.position).norm() < 1e-12);
    }

    #[test]
    fn model_validation() {
        assert!(model().validate().is_ok());
        let bad = ArmModel {
            upper_arm: 0.1,
            forearm: 0.2,
            ..model()
        };
        assert!(bad.validate().is_err());
    }

    /// In-limit elbow-down configurations whose tip is in front of the base
    /// (positive planar radius) and away from the fully folded/extended
    /// singularities, where the round trip is well conditioned.
    fn elbow_down_config() -> impl Strategy<Value = JointVector> {
        (-3.1f64..3.1, -3.1f64..3.1, 0.05f64..(PI - 0.05))
            .prop_map(|(a, b, c)| JointVector::new(a, b, c))
            .prop_filter("tip in front of base", |q| {
                let m = ArmModel::default();
                m.upper_arm * q.shoulder.cos() + m.forearm * (q.shoulder + q.elbow).cos() > 1e-3
            })
    }

    proptest! {
        #[test]
        fn ik_fk_round_trip(q in elbow_down_config()) {
            let m = model();
            let pose = forward_kinematics(&m, &q, &gripper()).unwrap();
            let back = inverse_kinematics(&m, &pose).unwrap();
            prop_assert!(back.max_abs_diff(&q) < 1e-6, "{q:?} -> {back:?}");
            prop_assert!((m.tip(&back) - pose.position).norm() < 1e-9);
        }

        #[test]
        fn fk_radius_bounded(a in -PI..PI, b in -PI..PI, c in -PI..PI) {
            let m = model();
            let p = m.tip(&JointVector::new(a, b, c));
            prop_assert!((p - m.shoulder()).norm() <= m.max_reach() + 1e-12);
        }

        #[test]
        fn interpolate_respects_speed_and_is_monotone(
            cur in prop::array::uniform3(-3.0f64..3.0),
            tgt in prop::array::uniform3(-3.0f64..3.0),
            dt in 1e-4f64..0.05,
        ) {
            let m = model();
            let (cur, tgt) = (JointVector::from_array(cur), JointVector::from_array(tgt));
            let next = interpolate_step(&cur, &tgt, dt, &m);
            for (a, b) in cur.to_array().iter().zip(next.to_array()) {
                prop_assert!((b - a).abs() <= m.max_joint_speed * dt + 1e-12);
            }
            for i in 0..3 {
                let before = (tgt.to_array()[i] - cur.to_array()[i]).abs();
                let after = (tgt.to_array()[i] - next.to_array()[i]).abs();
                prop_assert!(after <= before);
            }
        }
    }
}
