use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use armstack::controller::Controller;
use armstack::wire::{Command, ErrorCode, Mode, RobotState};
use armstack_core::kinematics::ToolPose;
use armstack_core::robot_model::RobotDescription;
use armstack_core::servo_sim::VirtualBus;
use armstack_core::transport::{SimTransport, Transport, TransportError};
use proptest::prelude::*;

const DT: f64 = 0.02;

fn sim() -> Controller<SimTransport> {
    let d = RobotDescription::default();
    let bus = VirtualBus::from_description(&d).unwrap();
    Controller::start(d, SimTransport::new(bus)).unwrap()
}

fn tick<T: Transport>(c: &mut Controller<T>) -> RobotState {
    c.control_tick(DT, Vec::new()).1
}

fn send<T: Transport>(
    c: &mut Controller<T>,
    cmd: Command,
) -> (Result<u64, armstack::wire::Rejection>, RobotState) {
    let (mut acks, state) = c.control_tick(DT, vec![cmd]);
    (acks.remove(0), state)
}

fn run_until_idle<T: Transport>(c: &mut Controller<T>, max_s: f64) -> RobotState {
    let mut state = tick(c);
    let mut t = 0.0;
    while state.mode != Mode::Idle {
        assert!(t < max_s, "still {:?} after {max_s} s", state.mode);
        state = tick(c);
        t += DT;
    }
    state
}

/// 4096 ticks per revolution, center at 2048.
fn ticks_oracle(angle: f64) -> i32 {
    2048 + (angle * 4096.0 / (2.0 * PI)).round() as i32
}

#[test]
fn idle_ticks_write_no_goals() {
    let mut c = sim();
    let bus_writes = c.transport().bus().stats().goal_writes;
    for _ in 0..100 {
        let s = tick(&mut c);
        assert_eq!(s.mode, Mode::Idle);
    }
    assert_eq!(c.stats().goal_writes, 0);
    assert_eq!(c.transport().bus().stats().goal_writes, bus_writes);
}

#[test]
fn state_seq_increases_and_time_advances() {
    let mut c = sim();
    let a = tick(&mut c);
    let b = tick(&mut c);
    assert_eq!(b.seq, a.seq + 1);
    assert_eq!(b.t - a.t, 20);
    assert_eq!(a.ticks, [2048; 5]);
    assert!((a.pose.z - 0.40).abs() < 1e-12);
}

#[test]
fn jog_converges_on_target_tick() {
    let mut c = sim();
    let (ack, _) = send(
        &mut c,
        Command::Jog {
            joint: 1,
            delta_ticks: 114,
        },
    );
    assert_eq!(ack, Ok(1));
    let s = run_until_idle(&mut c, 3.0);
    assert_eq!(s.ticks[0], 2162);
    let degrees = 114.0 * 360.0 / 4096.0;
    assert!((s.q[0].to_degrees() - degrees).abs() < 1e-9);
    assert!((degrees - 10.02).abs() < 0.01);
    assert_eq!(&s.ticks[1..], &[2048; 4]);
}

#[test]
fn consecutive_jogs_accumulate() {
    let mut c = sim();
    for _ in 0..3 {
        send(
            &mut c,
            Command::Jog {
                joint: 2,
                delta_ticks: -20,
            },
        )
        .0
        .unwrap();
        tick(&mut c);
    }
    let s = run_until_idle(&mut c, 3.0);
    assert_eq!(s.ticks[1], 2048 - 60);
    assert_eq!(s.cmd_seq, 3);
}

#[test]
fn jog_beyond_limit_is_rejected_without_side_effects() {
    let mut c = sim();
    // shoulder limit is ±π/2 = ±1024 ticks
    let (ack, s) = send(
        &mut c,
        Command::Jog {
            joint: 2,
            delta_ticks: 1100,
        },
    );
    assert_eq!(ack.unwrap_err().code, ErrorCode::LimitViolation);
    assert_eq!(s.mode, Mode::Idle);
    assert_eq!(s.cmd_seq, 0);
    assert_eq!(c.stats().goal_writes, 0);
}

#[test]
fn jog_during_trajectory_is_busy() {
    let mut c = sim();
    send(
        &mut c,
        Command::GotoJoints {
            q: [1.0, 0.5, 0.5, 0.5],
            w: None,
        },
    )
    .0
    .unwrap();
    let (ack, s) = send(
        &mut c,
        Command::Jog {
            joint: 1,
            delta_ticks: 20,
        },
    );
    assert_eq!(ack.unwrap_err().code, ErrorCode::Busy);
    assert_eq!(s.mode, Mode::Trajectory);
}

#[test]
fn gripper_command_reaches_width() {
    let mut c = sim();
    send(&mut c, Command::Gripper { width_m: 0.02 }).0.unwrap();
    let s = run_until_idle(&mut c, 5.0);
    // linear map: 0.02 of 0.06 m opening is a third of 1.2 rad
    let expected = ticks_oracle(0.4);
    assert!(
        (s.ticks[4] - expected).abs() <= 1,
        "{} vs {expected}",
        s.ticks[4]
    );
    assert!((s.w - 0.02).abs() < 1e-4);
    assert_eq!(&s.ticks[..4], &[2048; 4]);
}

#[test]
fn goto_pose_beyond_reach_is_unreachable() {
    let mut c = sim();
    let (ack, s) = send(
        &mut c,
        Command::GotoPose {
            pose: ToolPose::new(0.31, 0.0, 0.10, FRAC_PI_2),
            w: None,
        },
    );
    let r = ack.unwrap_err();
    assert_eq!(r.code, ErrorCode::Unreachable);
    assert_eq!(s.mode, Mode::Idle);
    assert_eq!(c.stats().goal_writes, 0);
}

#[test]
fn goto_pose_is_reached() {
    let mut c = sim();
    let target = ToolPose::new(0.20, 0.05, 0.15, 1.8);
    send(
        &mut c,
        Command::GotoPose {
            pose: target,
            w: None,
        },
    )
    .0
    .unwrap();
    let s = run_until_idle(&mut c, 10.0);
    let reached = ToolPose::new(s.pose.x, s.pose.y, s.pose.z, s.pose.pitch);
    // one tick is 1.5 mrad; over 0.3 m of links that is well under 2 mm
    assert!(reached.position_distance(&target) < 2e-3);
}

#[test]
fn home_returns_to_vertical() {
    let mut c = sim();
    send(
        &mut c,
        Command::GotoJoints {
            q: [0.7, 0.6, -0.9, 0.4],
            w: Some(0.05),
        },
    )
    .0
    .unwrap();
    let s = run_until_idle(&mut c, 10.0);
    assert_ne!(s.ticks, [2048; 5]);
    send(&mut c, Command::Home).0.unwrap();
    let s = run_until_idle(&mut c, 10.0);
    assert_eq!(s.ticks, [2048; 5]);
    assert!(s.pose.x.abs() < 1e-12 && s.pose.y.abs() < 1e-12);
    assert!((s.pose.z - 0.40).abs() < 1e-12);
    assert!(s.pose.pitch.abs() < 1e-12);
}

#[test]
fn stop_holds_and_ends_streaming() {
    let mut c = sim();
    send(
        &mut c,
        Command::GotoJoints {
            q: [1.5, 0.0, 0.0, 0.0],
            w: None,
        },
    )
    .0
    .unwrap();
    for _ in 0..20 {
        tick(&mut c);
    }
    let (ack, s) = send(&mut c, Command::Stop);
    ack.unwrap();
    assert_eq!(s.mode, Mode::Idle);
    let writes = c.stats().goal_writes;
    let held = run_until_idle(&mut c, 1.0);
    for _ in 0..50 {
        assert_eq!(tick(&mut c).ticks, held.ticks);
    }
    assert_eq!(c.stats().goal_writes, writes);
    assert!(held.ticks[0] > 2048 && held.ticks[0] < ticks_oracle(1.5));
}

#[test]
fn stop_preempts_commands_in_the_same_tick() {
    let mut c = sim();
    let (acks, s) = c.control_tick(
        DT,
        vec![
            Command::GotoJoints {
                q: [1.0, 0.0, 0.0, 0.0],
                w: None,
            },
            Command::Stop,
            Command::Jog {
                joint: 1,
                delta_ticks: 20,
            },
        ],
    );
    assert_eq!(acks[0].as_ref().unwrap_err().code, ErrorCode::Preempted);
    assert_eq!(acks[1], Ok(1));
    assert_eq!(acks[2].as_ref().unwrap_err().code, ErrorCode::Preempted);
    assert_eq!(s.mode, Mode::Idle);
    assert_eq!(c.stats().goal_writes, 0);
}

#[test]
fn batched_commands_apply_in_order() {
    let mut c = sim();
    let (acks, _) = c.control_tick(
        DT,
        vec![
            Command::SetSpeedScale { s: 0.5 },
            Command::Jog {
                joint: 1,
                delta_ticks: 10,
            },
            Command::Jog {
                joint: 1,
                delta_ticks: 10,
            },
        ],
    );
    assert_eq!(acks, vec![Ok(1), Ok(2), Ok(3)]);
    let s = run_until_idle(&mut c, 3.0);
    assert_eq!(s.ticks[0], 2068);
    assert_eq!(s.speed_scale, 0.5);
}

#[test]
fn speed_scale_stretches_moves() {
    let duration = |s: f64| {
        let mut c = sim();
        send(&mut c, Command::SetSpeedScale { s }).0.unwrap();
        send(
            &mut c,
            Command::GotoJoints {
                q: [1.0, 0.0, 0.0, 0.0],
                w: None,
            },
        )
        .0
        .unwrap();
        c.remaining().unwrap() + DT
    };
    // halving v and quartering a doubles T for any profile shape
    assert!((duration(0.5) / duration(1.0) - 2.0).abs() < 1e-9);
}

/// Sim transport whose replies can be switched off, like a cut cable.
struct Flaky {
    inner: SimTransport,
    silent: Arc<AtomicBool>,
}

impl Transport for Flaky {
    fn write(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.inner.write(bytes)
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<usize, TransportError> {
        if self.silent.load(Ordering::Relaxed) {
            let mut sink = [0u8; 256];
            while self.inner.read(&mut sink)? > 0 {}
            return Ok(0);
        }
        self.inner.read(buf)
    }

    fn advance(&mut self, dt: f64) {
        self.inner.advance(dt)
    }
}

#[test]
fn lost_replies_fault_the_arm_until_home() {
    let d = RobotDescription::default();
    let silent = Arc::new(AtomicBool::new(false));
    let flaky = Flaky {
        inner: SimTransport::new(VirtualBus::from_description(&d).unwrap()),
        silent: silent.clone(),
    };
    let mut c = Controller::start(d, flaky).unwrap();
    send(
        &mut c,
        Command::GotoJoints {
            q: [0.8, 0.3, 0.3, 0.0],
            w: None,
        },
    )
    .0
    .unwrap();
    for _ in 0..10 {
        tick(&mut c);
    }
    silent.store(true, Ordering::Relaxed);
    let s = tick(&mut c);
    assert_eq!(s.mode, Mode::Fault);
    assert!(s.fault.as_deref().unwrap().contains("no response"));
    assert_eq!(c.stats().faults, 1);
    let bus = c.transport().inner.bus();
    assert!((1..=5).all(|id| !bus.servo(id).unwrap().torque_enabled()));

    let writes = c.transport().inner.bus().stats().goal_writes;
    for cmd in [
        Command::Jog {
            joint: 1,
            delta_ticks: 20,
        },
        Command::GotoJoints {
            q: [0.0; 4],
            w: None,
        },
        Command::Gripper { width_m: 0.01 },
    ] {
        let (ack, s) = send(&mut c, cmd);
        assert_eq!(ack.unwrap_err().code, ErrorCode::Fault);
        assert_eq!(s.mode, Mode::Fault);
    }
    // Home cannot clear the fault while the bus is still silent
    assert_eq!(
        send(&mut c, Command::Home).0.unwrap_err().code,
        ErrorCode::Fault
    );
    for _ in 0..20 {
        tick(&mut c);
    }
    assert_eq!(c.transport().inner.bus().stats().goal_writes, writes);

    silent.store(false, Ordering::Relaxed);
    send(&mut c, Command::Home).0.unwrap();
    let bus = c.transport().inner.bus();
    assert!((1..=5).all(|id| bus.servo(id).unwrap().torque_enabled()));
    let s = run_until_idle(&mut c, 10.0);
    assert_eq!(s.ticks, [2048; 5]);
    assert!(s.fault.is_none());
}

#[test]
fn stop_also_clears_a_fault() {
    let d = RobotDescription::default();
    let silent = Arc::new(AtomicBool::new(true));
    let flaky = Flaky {
        inner: SimTransport::new(VirtualBus::from_description(&d).unwrap()),
        silent: silent.clone(),
    };
    // start needs answers
    silent.store(false, Ordering::Relaxed);
    let mut c = Controller::start(d, flaky).unwrap();
    silent.store(true, Ordering::Relaxed);
    assert_eq!(tick(&mut c).mode, Mode::Fault);
    silent.store(false, Ordering::Relaxed);
    let (ack, s) = send(&mut c, Command::Stop);
    ack.unwrap();
    assert_eq!(s.mode, Mode::Idle);
    send(
        &mut c,
        Command::Jog {
            joint: 3,
            delta_ticks: 40,
        },
    )
    .0
    .unwrap();
    assert_eq!(run_until_idle(&mut c, 3.0).ticks[2], 2088);
}

#[test]
fn silent_bus_refuses_to_start() {
    let d = RobotDescription::default();
    let flaky = Flaky {
        inner: SimTransport::new(VirtualBus::from_description(&d).unwrap()),
        silent: Arc::new(AtomicBool::new(true)),
    };
    assert!(Controller::start(d, flaky).is_err());
}

fn goals_within_limits(c: &Controller<SimTransport>) -> Result<(), TestCaseError> {
    let d = c.description();
    for j in &d.joints {
        let goal = c
            .transport()
            .bus()
            .servo(j.motor_id)
            .unwrap()
            .goal_position();
        let angle = (f64::from(goal) - 2048.0) * 2.0 * PI / 4096.0;
        prop_assert!(
            angle >= j.limit_min_rad - 1e-12 && angle <= j.limit_max_rad + 1e-12,
            "motor {} goal {goal} ({angle} rad) outside [{}, {}]",
            j.motor_id,
            j.limit_min_rad,
            j.limit_max_rad
        );
    }
    Ok(())
}

fn any_command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (1u8..=5, -600i32..600)
            .prop_map(|(joint, delta_ticks)| Command::Jog { joint, delta_ticks }),
        (
            prop::array::uniform4(-3.5f64..3.5),
            prop::option::of(-0.01f64..0.08)
        )
            .prop_map(|(q, w)| Command::GotoJoints { q, w }),
        (0.0f64..0.32, -0.3f64..0.3, -0.1f64..0.45, 0.0f64..3.2).prop_map(|(x, y, z, p)| {
            Command::GotoPose {
                pose: ToolPose::new(x, y, z, p),
                w: None,
            }
        }),
        (-0.01f64..0.08).prop_map(|width_m| Command::Gripper { width_m }),
        Just(Command::Home),
        Just(Command::Stop),
        (0.1f64..=1.0).prop_map(|s| Command::SetSpeedScale { s }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn goal_positions_never_leave_limits(
        script in prop::collection::vec((any_command(), 1usize..40), 1..8)
    ) {
        let mut c = sim();
        for (cmd, ticks) in script {
            let (ack, s) = send(&mut c, cmd);
            if ack.is_err() {
                prop_assert_ne!(s.mode, Mode::Fault);
            }
            goals_within_limits(&c)?;
            for _ in 0..ticks {
                tick(&mut c);
                goals_within_limits(&c)?;
            }
        }
    }
}
