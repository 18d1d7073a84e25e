use nalgebra::Vector3;
use twinloop::kinematics::{forward_kinematics, JointVector};
use twinloop::scene::{SceneObject, Shape};
use twinloop::tasks::{Scenario, TaskKind};
use twinloop::twinsync::ScaleMode;
use twinloop_gateway::protocol::{PlaceObject, RemoveObject, SetNetem, SetScale, StylusMove};
use twinloop_gateway::{parse_command, CommandError, ControlCommand, Controller, StateSnapshot, MAX_SNAPSHOT_POINTS};

fn controller() -> Controller {
    Controller::new(Scenario::default()).unwrap()
}

fn run(c: &mut Controller, ticks: usize) {
    for _ in 0..ticks {
        c.advance().unwrap();
    }
}

fn stylus(p: [f64; 3]) -> ControlCommand {
    ControlCommand::StylusMove(StylusMove {
        position: p,
        closed: false,
    })
}

fn sphere(radius: f64) -> ControlCommand {
    ControlCommand::PlaceObject(PlaceObject {
        position: [0.3, 0.05, 0.03],
        class: None,
        shape: Some(Shape::Sphere {
            center: Vector3::zeros(),
            radius,
        }),
        instance: Some(77),
        color: None,
    })
}

#[test]
fn starts_paused_and_only_ticks_when_running() {
    let mut c = controller();
    assert!(!c.is_running());
    run(&mut c, 5);
    assert_eq!(c.session().tick(), 0);
    c.apply(ControlCommand::Start).unwrap();
    run(&mut c, 5);
    assert_eq!(c.session().tick(), 5);
    c.apply(ControlCommand::Pause).unwrap();
    run(&mut c, 5);
    assert_eq!(c.session().tick(), 5);
}

#[test]
fn idle_snapshots_differ_only_in_time() {
    let mut c = controller();
    c.apply(ControlCommand::Start).unwrap();
    run(&mut c, 1100);
    let mut a = c.snapshot();
    run(&mut c, 33);
    let mut b = c.snapshot();
    assert_ne!(a.tick, b.tick);
    for s in [&mut a, &mut b] {
        s.tick = 0;
        s.time = 0.0;
    }
    assert_eq!(a, b);
    assert_eq!(a.metrics.pose_bytes_per_s, 46_000.0);
}

#[test]
fn stylus_move_reaches_dt1_within_one_tick() {
    let mut c = controller();
    c.apply(ControlCommand::Start).unwrap();
    c.apply(stylus([0.02, 0.01, 0.03])).unwrap();
    run(&mut c, 1);
    let s = c.snapshot();
    let expected = Vector3::new(0.32, 0.01, 0.03);
    assert!((s.dt1.pose.position - expected).norm() < 1e-12, "{:?}", s.dt1.pose);
}

#[test]
fn micro_scale_divides_subsequent_motion() {
    let mut c = controller();
    c.apply(ControlCommand::Start).unwrap();
    c.apply(stylus([0.01, 0.0, 0.02])).unwrap();
    run(&mut c, 1);
    let before = c.snapshot().dt1.pose.position;
    c.apply(ControlCommand::SetScale(SetScale { mode: ScaleMode::Micro })).unwrap();
    c.apply(stylus([0.01 + 0.013, 0.0, 0.02])).unwrap();
    run(&mut c, 1);
    let s = c.snapshot();
    assert_eq!(s.scale, ScaleMode::Micro);
    assert_eq!(s.scale_factor, 1.3);
    let moved = s.dt1.pose.position - before;
    assert!((moved - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-12, "{moved}");
}

#[test]
fn set_netem_shows_in_next_snapshot() {
    let mut c = controller();
    c.apply(ControlCommand::SetNetem(SetNetem {
        rtt: Some(0.1),
        ..SetNetem::default()
    }))
    .unwrap();
    let s = c.snapshot();
    assert_eq!(s.netem.rtt, 0.1);
    assert_eq!(s.netem.loss, 0.0);
    let bad = c.apply(ControlCommand::SetNetem(SetNetem {
        loss: Some(1.5),
        ..SetNetem::default()
    }));
    assert_eq!(bad.unwrap_err().path(), Some("loss"));
    assert_eq!(c.snapshot().netem.rtt, 0.1);
}

#[test]
fn negative_radius_is_rejected_without_change() {
    let mut c = controller();
    let before = c.session().world().to_vec();
    let trace_len = c.session().trace().lines().len();
    let err = c.apply(sphere(-0.02)).unwrap_err();
    assert!(matches!(err, CommandError::Invalid { .. }));
    assert_eq!(err.path(), Some("shape.radius"));
    assert_eq!(c.session().world(), &before[..]);
    assert_eq!(c.session().trace().lines().len(), trace_len);

    c.apply(sphere(0.02)).unwrap();
    assert!(c.session().world().iter().any(|o: &SceneObject| o.instance_id == 77));
    c.apply(ControlCommand::RemoveObject(RemoveObject { instance: 77 })).unwrap();
    let missing = c.apply(ControlCommand::RemoveObject(RemoveObject { instance: 77 }));
    assert_eq!(missing.unwrap_err().path(), Some("instance"));
}

#[test]
fn place_needs_class_or_shape() {
    let mut c = controller();
    let cmd = parse_command(r#"{"v":1,"type":"place_object","position":[0.3,0,0.02]}"#).unwrap();
    assert_eq!(c.apply(cmd).unwrap_err().path(), Some("shape"));
    let cmd = parse_command(r#"{"v":1,"type":"place_object","position":[0.3,0,0.02],"class":999}"#).unwrap();
    assert_eq!(c.apply(cmd).unwrap_err().path(), Some("class"));
}

#[test]
fn reset_is_busy_until_the_next_tick() {
    let mut c = controller();
    c.apply(ControlCommand::Start).unwrap();
    c.apply(stylus([0.02, 0.0, 0.0])).unwrap();
    run(&mut c, 50);
    c.apply(ControlCommand::Reset).unwrap();
    assert_eq!(c.apply(ControlCommand::Start), Err(CommandError::Busy));
    c.advance().unwrap();
    assert!(!c.is_resetting());
    assert!(!c.is_running());
    let s = c.snapshot();
    assert_eq!(s.tick, 0);
    assert!((s.dt1.pose.position - Vector3::new(0.3, 0.0, 0.0)).norm() < 1e-9);
    c.apply(ControlCommand::Start).unwrap();
}

fn assert_consistent(s: &StateSnapshot, c: &Controller) {
    let model = &c.session().config().arm;
    for view in [&s.dt1, &s.dt2] {
        let fk = forward_kinematics(model, &JointVector::from_array(view.joints), &view.pose).unwrap();
        assert!((fk.position - view.pose.position).norm() < 1e-12);
    }
    let robot = model.tip(&JointVector::from_array(s.robot.joints));
    assert!((robot - s.robot.pose.position).norm() < 1e-12);
}

#[test]
fn snapshots_are_self_consistent_and_cloud_is_bounded() {
    let mut sc = Scenario::default();
    sc.session.sensing.enabled = true;
    sc.task.kind = TaskKind::Hold;
    let mut c = Controller::new(sc).unwrap();
    c.apply(ControlCommand::Start).unwrap();
    // A large foreign slab fills much of the image.
    c.apply(ControlCommand::PlaceObject(PlaceObject {
        position: [0.3, 0.0, 0.15],
        class: None,
        shape: Some(Shape::Box {
            center: Vector3::zeros(),
            half_extents: Vector3::new(0.2, 0.2, 0.01),
        }),
        instance: Some(500),
        color: Some([20, 20, 20]),
    }))
    .unwrap();
    for k in 0..400 {
        if k % 7 == 0 {
            c.apply(stylus([0.001 * (k % 30) as f64, 0.0, 0.02])).unwrap();
        }
        c.advance().unwrap();
        let s = c.snapshot();
        assert!(s.cloud.len() <= MAX_SNAPSHOT_POINTS);
        assert_consistent(&s, &c);
    }
    let s = c.snapshot();
    assert!(s.cloud_total > MAX_SNAPSHOT_POINTS, "{}", s.cloud_total);
    assert!(!s.cloud.is_empty());
    assert_eq!(c.snapshot().cloud, s.cloud);
}

#[test]
fn snapshot_reads_leave_the_trace_unchanged() {
    let script = |c: &mut Controller, observe: bool| {
        c.apply(ControlCommand::Start).unwrap();
        for k in 0..300u32 {
            if k % 10 == 0 {
                c.apply(stylus([0.0001 * k as f64, 0.0, 0.01])).unwrap();
            }
            c.advance().unwrap();
            if observe {
                let _ = c.snapshot();
                let _ = c.info();
            }
        }
        c.session().trace().text()
    };
    let mut quiet = controller();
    let mut watched = controller();
    assert_eq!(script(&mut quiet, false), script(&mut watched, true));
}
