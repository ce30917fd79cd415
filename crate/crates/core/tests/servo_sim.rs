use armstack_core::dxl_protocol::{
    encode, FrameBuffer, InstructionPacket, Packet, StatusPacket, BROADCAST_ID,
};
use armstack_core::robot_model::RobotDescription;
use armstack_core::servo_sim::{reg, Register, SimConfig, VirtualBus};
use proptest::prelude::*;

const DT: f64 = 1.0 / 50.0;

fn bus() -> VirtualBus {
    VirtualBus::from_description(&RobotDescription::default()).unwrap()
}

fn request(bus: &mut VirtualBus, p: &InstructionPacket) -> Vec<StatusPacket> {
    let bytes = bus.handle(&encode(p).unwrap());
    let mut fb = FrameBuffer::new();
    let out: Vec<_> = fb
        .feed(&bytes)
        .into_iter()
        .map(|p| match p {
            Packet::Status(s) => s,
            other => panic!("servo sent an instruction: {other:?}"),
        })
        .collect();
    assert_eq!(fb.buffered(), 0, "trailing bytes in response");
    assert_eq!(fb.stats().crc_errors, 0);
    out
}

fn write_ok(bus: &mut VirtualBus, id: u8, r: Register, value: i32) {
    let data = value.to_le_bytes();
    let p = InstructionPacket::write(id, r.address, &data[..usize::from(r.size)]);
    let s = request(bus, &p);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].error, 0, "write {r:?} = {value}");
}

/// Profile velocity register value closest to `ticks_per_s`.
fn profile_velocity_for(ticks_per_s: f64, cfg: &SimConfig) -> i32 {
    // 0.229 rpm per unit at 4096 ticks/rev
    let per_unit = cfg.velocity_unit_rpm * f64::from(cfg.ticks_per_rev) / 60.0;
    (ticks_per_s / per_unit).round() as i32
}

#[test]
fn goal_step_converges_on_schedule() {
    let mut bus = bus();
    let cfg = *bus.config();
    let pv = profile_velocity_for(512.0, &cfg);
    assert_eq!(pv, 33);
    write_ok(&mut bus, 1, reg::PROFILE_VELOCITY, pv);
    write_ok(&mut bus, 1, reg::TORQUE_ENABLE, 1);
    write_ok(&mut bus, 1, reg::GOAL_POSITION, 2048 + 1024);

    let mut trace = vec![bus.servo(1).unwrap().present_position()];
    let mut reached = None;
    for k in 1..=200 {
        bus.step(DT);
        let s = bus.servo(1).unwrap();
        trace.push(s.present_position());
        if reached.is_none() && (s.present_position() - 3072).abs() <= 1 {
            reached = Some(k);
        }
    }
    let k = reached.expect("goal never reached");
    assert!((98..=102).contains(&k), "reached at step {k}");
    assert!(trace.windows(2).all(|w| w[1] >= w[0]), "not monotone");
    assert!(trace.iter().all(|&p| p <= 3073), "overshoot");
    assert_eq!(*trace.last().unwrap(), 3072);
    assert!(!bus.servo(1).unwrap().moving());
}

#[test]
fn identical_command_streams_give_identical_bytes() {
    let script = [
        InstructionPacket::ping(BROADCAST_ID),
        InstructionPacket::write(2, reg::TORQUE_ENABLE.address, &[1]),
        InstructionPacket::write(2, reg::GOAL_POSITION.address, &1000i32.to_le_bytes()),
        InstructionPacket::read(2, reg::PRESENT_POSITION.address, 4),
        InstructionPacket::write(2, reg::PRESENT_POSITION.address, &[0; 4]),
        InstructionPacket::read(9, 0, 2),
    ];
    let run = || {
        let mut bus = bus();
        let mut out = Vec::new();
        for p in &script {
            out.extend(bus.handle(&encode(p).unwrap()));
            bus.step(DT);
        }
        (out, bus.stats())
    };
    assert_eq!(run(), run());
}

#[test]
fn broadcast_ping_answers_from_every_servo() {
    let mut bus = bus();
    let answers = request(&mut bus, &InstructionPacket::ping(BROADCAST_ID));
    let ids: Vec<_> = answers.iter().map(|s| s.id).collect();
    assert_eq!(ids, [1, 2, 3, 4, 5]);
    for s in answers {
        assert_eq!(s.params, [0x24, 0x04, 46]);
    }
}

#[test]
fn sync_write_moves_all_addressed_servos() {
    let mut bus = bus();
    for id in 1..=5 {
        write_ok(&mut bus, id, reg::PROFILE_VELOCITY, 0);
        write_ok(&mut bus, id, reg::TORQUE_ENABLE, 1);
    }
    let goals: Vec<[u8; 4]> = (1..=5)
        .map(|k: i32| (1000 + 100 * k).to_le_bytes())
        .collect();
    let p = InstructionPacket::sync_write(
        reg::GOAL_POSITION.address,
        4,
        goals.iter().zip(1u8..).map(|(g, id)| (id, &g[..])),
    );
    assert!(request(&mut bus, &p).is_empty());
    bus.step(DT);
    for id in 1..=5u8 {
        assert_eq!(
            bus.servo(id).unwrap().present_position(),
            1000 + 100 * i32::from(id)
        );
    }
    assert_eq!(bus.stats().goal_writes, 5);
}

proptest! {
    #[test]
    fn motion_is_rate_limited_and_never_overshoots(
        moves in prop::collection::vec((0i32..4096, 1i32..200, 1usize..80), 1..6)
    ) {
        let mut bus = bus();
        let per_unit = bus.config().ticks_per_s_per_unit();
        write_ok(&mut bus, 3, reg::TORQUE_ENABLE, 1);
        for (goal, pv, steps) in moves {
            write_ok(&mut bus, 3, reg::PROFILE_VELOCITY, pv);
            write_ok(&mut bus, 3, reg::GOAL_POSITION, goal);
            let limit = f64::from(pv) * per_unit * DT;
            for _ in 0..steps {
                let before = bus.servo(3).unwrap().position();
                bus.step(DT);
                let after = bus.servo(3).unwrap().position();
                prop_assert!((after - before).abs() <= limit + 1e-9);
                // movement is always towards the goal and stops on it
                let g = f64::from(goal);
                prop_assert!((g - after).abs() <= (g - before).abs());
                prop_assert!((g - after) * (g - before) >= 0.0);
            }
        }
    }
}
