//! The fixed-rate control loop body: commands in, goal writes out, state
//! read back from the servos.
//!
//! [`Controller`] is synchronous and owns its [`BusMaster`]; the service
//! runs it on a dedicated thread and the script runner drives it with
//! simulated time.

use std::f64::consts::TAU;

use armstack_core::kinematics::{
    actuator_angles, forward, gripper_width_for_angle, inverse_analytic, joints_from_actuators,
    Branch, IkError,
};
use armstack_core::motion::{
    check_limits, plan_cartesian_line_scaled, plan_joint_move_scaled, MotionError, Trajectory,
    DEFAULT_LINE_STEP,
};
use armstack_core::robot_model::{JointVector, RobotDescription, GRIPPER_JOINT, JOINT_COUNT};
use armstack_core::servo_sim::reg;
use armstack_core::transport::{BusError, BusMaster, Transport};
use thiserror::Error;
use tracing::{debug, warn};

use crate::wire::{Command, ErrorCode, Mode, Rejection, RobotState, WIRE_VERSION};

/// XL430 `ProfileVelocity` unit, rev/min per LSB.
pub const VELOCITY_UNIT_RPM: f64 = 0.229;

/// Longest wait for the servos to report standstill after a trajectory.
const SETTLE_TIMEOUT_S: f64 = 2.0;

/// First register of the block read every tick (Moving .. PresentPosition).
const STATUS_BLOCK: u16 = reg::MOVING.address;
const STATUS_BLOCK_LEN: u16 = reg::PRESENT_POSITION.address + 4 - STATUS_BLOCK;

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("joint {joint} reads {angle:.4} rad, outside its limits; move it by hand first")]
    OutOfLimits { joint: usize, angle: f64 },
}

/// `ProfileVelocity` register value that lets a servo keep up with `vmax`.
pub fn profile_velocity_for(vmax_rad_s: f64) -> u32 {
    let rpm = vmax_rad_s / TAU * 60.0;
    (rpm / VELOCITY_UNIT_RPM).ceil() as u32
}

/// Maps a motion planning error onto the wire codes.
pub fn rejection_for(e: &MotionError) -> Rejection {
    let code = match e {
        MotionError::LimitViolation(_) => ErrorCode::LimitViolation,
        MotionError::Unreachable { .. } | MotionError::BranchFlip { .. } => ErrorCode::Unreachable,
        MotionError::InvalidStep | MotionError::InvalidSpeedScale => ErrorCode::InvalidArgument,
    };
    Rejection::new(code, e.to_string())
}

fn limit_rejection(report: armstack_core::motion::LimitReport) -> Rejection {
    rejection_for(&MotionError::LimitViolation(report))
}

/// The all-center configuration: every actuator at its center tick.
pub fn home_configuration(d: &RobotDescription) -> JointVector {
    joints_from_actuators(&[0.0; JOINT_COUNT], d)
}

/// Plans the motion for a trajectory-type command starting at rest at
/// `from`. Jog, Stop and SetSpeedScale are handled by the controller.
pub fn plan_command(
    d: &RobotDescription,
    from: &JointVector,
    cmd: &Command,
    speed_scale: f64,
) -> Result<Trajectory, Rejection> {
    let joint_move = |to: JointVector| {
        let report = check_limits(&to, d);
        if !report.is_empty() {
            return Err(limit_rejection(report));
        }
        plan_joint_move_scaled(from, &to, d, speed_scale).map_err(|e| rejection_for(&e))
    };
    match cmd {
        Command::GotoJoints { q, w } => joint_move(JointVector::new(*q, w.unwrap_or(from.w))),
        Command::Gripper { width_m } => joint_move(JointVector::new(from.q, *width_m)),
        Command::Home => joint_move(home_configuration(d)),
        Command::GotoPose { pose, w } => {
            let prefer = Branch::of_elbow(from.q[2]);
            let sol = inverse_analytic(pose, d, prefer).map_err(|e| match e {
                IkError::LimitViolation { .. } => Rejection::new(
                    ErrorCode::LimitViolation,
                    "every IK solution violates limits",
                ),
                IkError::NonFinite => Rejection::new(ErrorCode::InvalidArgument, e.to_string()),
                _ => Rejection::new(ErrorCode::Unreachable, e.to_string()),
            })?;
            joint_move(sol.joints(w.unwrap_or(from.w)))
        }
        Command::MoveLine { pose, w, step } => {
            let start = forward(from, d);
            let width = w.unwrap_or(from.w);
            let mut t = Trajectory::hold(*from, d);
            if width != from.w {
                t.append(joint_move(JointVector::new(from.q, width))?);
            }
            let line = plan_cartesian_line_scaled(
                &start,
                pose,
                width,
                d,
                step.unwrap_or(DEFAULT_LINE_STEP),
                Branch::of_elbow(from.q[2]),
                speed_scale,
            )
            .map_err(|e| rejection_for(&e))?;
            // The line's first sample is re-solved by IK; bridge to it if
            // that lands on a different configuration of the same pose.
            let at = t.goal();
            let entry = line.start();
            if entry.q.iter().zip(&at.q).any(|(a, b)| (a - b).abs() > 1e-9) {
                t.append(
                    plan_joint_move_scaled(&at, &entry, d, speed_scale)
                        .map_err(|e| rejection_for(&e))?,
                );
            }
            t.append(line);
            Ok(t)
        }
        Command::Jog { .. } | Command::Stop | Command::SetSpeedScale { .. } => {
            unreachable!("not a planned command")
        }
    }
}

#[derive(Debug, Clone)]
struct Active {
    trajectory: Trajectory,
    elapsed: f64,
    mode: Mode,
    /// Actuator targets in ticks, which jogs accumulate onto.
    target_ticks: [i32; JOINT_COUNT],
}

/// Counters exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControllerStats {
    pub ticks: u64,
    /// SyncWrite frames carrying goal positions.
    pub goal_writes: u64,
    pub faults: u64,
}

pub struct Controller<T> {
    desc: RobotDescription,
    bus: BusMaster<T>,
    ids: [u8; JOINT_COUNT],
    /// Allowed goal ticks per actuator, so rounding never leaves the limits.
    tick_bounds: [(i32, i32); JOINT_COUNT],
    mode: Mode,
    fault: Option<String>,
    active: Option<Active>,
    settle_time: f64,
    /// Last commanded configuration.
    setpoint: JointVector,
    goal_ticks: [i32; JOINT_COUNT],
    present: [i32; JOINT_COUNT],
    moving: [bool; JOINT_COUNT],
    speed_scale: f64,
    seq: u64,
    cmd_seq: u64,
    time: f64,
    stats: ControllerStats,
}

impl<T: Transport> Controller<T> {
    /// Pings every servo, sets its profile velocity from the joint's
    /// `vmax`, holds it where it is and enables torque.
    pub fn start(desc: RobotDescription, transport: T) -> Result<Self, StartError> {
        let mut bus = BusMaster::new(transport);
        let mut ids = [0u8; JOINT_COUNT];
        for (id, j) in ids.iter_mut().zip(&desc.joints) {
            *id = j.motor_id;
        }
        let mut present = [0i32; JOINT_COUNT];
        for (k, &id) in ids.iter().enumerate() {
            let info = bus.ping(id)?;
            debug!(id, model = info.model_number, "servo found");
            present[k] = read_status(&mut bus, id)?.1;
        }
        let angles: [f64; JOINT_COUNT] =
            core::array::from_fn(|k| desc.joints[k].ticks_to_angle(present[k]));
        for (k, j) in desc.joints.iter().enumerate() {
            if !j.contains(angles[k]) {
                return Err(StartError::OutOfLimits {
                    joint: k + 1,
                    angle: angles[k],
                });
            }
        }
        for (k, &id) in ids.iter().enumerate() {
            let pv = profile_velocity_for(desc.joints[k].vmax_rad_s);
            bus.write(id, reg::PROFILE_VELOCITY.address, &pv.to_le_bytes())?;
            bus.write(id, reg::GOAL_POSITION.address, &present[k].to_le_bytes())?;
            bus.write(id, reg::TORQUE_ENABLE.address, &[1])?;
        }
        let tick_bounds = core::array::from_fn(|k| {
            let j = &desc.joints[k];
            let a = j.angle_to_ticks(j.limit_min_rad);
            let b = j.angle_to_ticks(j.limit_max_rad);
            let (mut lo, mut hi) = (a.min(b), a.max(b));
            while !j.contains(j.ticks_to_angle(lo)) {
                lo += 1;
            }
            while !j.contains(j.ticks_to_angle(hi)) {
                hi -= 1;
            }
            let top = j.ticks_per_rev as i32 - 1;
            (lo.clamp(0, top), hi.clamp(0, top))
        });
        Ok(Self {
            setpoint: joints_from_actuators(&angles, &desc),
            desc,
            bus,
            ids,
            tick_bounds,
            mode: Mode::Idle,
            fault: None,
            active: None,
            settle_time: 0.0,
            goal_ticks: present,
            present,
            moving: [false; JOINT_COUNT],
            speed_scale: 1.0,
            seq: 0,
            cmd_seq: 0,
            time: 0.0,
            stats: ControllerStats::default(),
        })
    }

    pub fn description(&self) -> &RobotDescription {
        &self.desc
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn setpoint(&self) -> JointVector {
        self.setpoint
    }

    pub fn stats(&self) -> ControllerStats {
        self.stats
    }

    pub fn transport(&self) -> &T {
        self.bus.transport()
    }

    pub fn transport_mut(&mut self) -> &mut T {
        self.bus.transport_mut()
    }

    /// Remaining planned time of the active motion, if any.
    pub fn remaining(&self) -> Option<f64> {
        self.active
            .as_ref()
            .map(|a| (a.trajectory.duration() - a.elapsed).max(0.0))
    }

    /// One loop iteration: applies `commands` (in arrival order), streams
    /// the active trajectory, reads the servos back and returns one ack per
    /// command plus the published state.
    pub fn control_tick(
        &mut self,
        dt: f64,
        commands: Vec<Command>,
    ) -> (Vec<Result<u64, Rejection>>, RobotState) {
        self.stats.ticks += 1;
        self.time += dt;
        let acks = self.apply(commands);
        if self.mode != Mode::Fault {
            if let Err(e) = self.stream(dt) {
                self.enter_fault(e);
            }
        }
        self.bus.advance(dt);
        if let Err(e) = self.read_back() {
            if self.mode != Mode::Fault {
                self.enter_fault(e);
            }
        }
        if self.mode != Mode::Fault && self.active.is_none() && self.mode != Mode::Idle {
            self.settle_time += dt;
            if !self.moving.iter().any(|&m| m) {
                self.mode = Mode::Idle;
            } else if self.settle_time > SETTLE_TIMEOUT_S {
                warn!("servos still moving {SETTLE_TIMEOUT_S} s after trajectory end");
                self.mode = Mode::Idle;
            }
        }
        (acks, self.state())
    }

    fn apply(&mut self, commands: Vec<Command>) -> Vec<Result<u64, Rejection>> {
        let stop = commands.iter().any(|c| matches!(c, Command::Stop));
        commands
            .into_iter()
            .map(|cmd| {
                if stop && cmd != Command::Stop {
                    return Err(Rejection::new(ErrorCode::Preempted, "preempted by stop"));
                }
                self.apply_one(&cmd)?;
                self.cmd_seq += 1;
                Ok(self.cmd_seq)
            })
            .collect()
    }

    fn apply_one(&mut self, cmd: &Command) -> Result<(), Rejection> {
        match cmd {
            Command::Stop => {
                self.active = None;
                if self.mode == Mode::Fault {
                    self.clear_fault()?;
                }
                self.mode = Mode::Idle;
                Ok(())
            }
            Command::SetSpeedScale { s } => {
                self.speed_scale = *s;
                Ok(())
            }
            Command::Home if self.mode == Mode::Fault => {
                self.clear_fault()?;
                self.start_trajectory(cmd)
            }
            _ if self.mode == Mode::Fault => Err(Rejection::new(
                ErrorCode::Fault,
                self.fault.clone().unwrap_or_default(),
            )),
            Command::Jog { joint, delta_ticks } => self.jog(usize::from(*joint) - 1, *delta_ticks),
            _ => self.start_trajectory(cmd),
        }
    }

    fn jog(&mut self, k: usize, delta: i32) -> Result<(), Rejection> {
        let mut target = match &self.active {
            Some(a) if a.mode == Mode::Jog => a.target_ticks,
            Some(_) => {
                return Err(Rejection::new(
                    ErrorCode::Busy,
                    "a trajectory is running; stop it first",
                ))
            }
            None => self.goal_ticks,
        };
        target[k] = target[k].saturating_add(delta);
        let angles: [f64; JOINT_COUNT] =
            core::array::from_fn(|i| self.desc.joints[i].ticks_to_angle(target[i]));
        let goal = joints_from_actuators(&angles, &self.desc);
        let j = &self.desc.joints[k];
        let gripper_clamped =
            k == GRIPPER_JOINT && gripper_width_for_angle(angles[k], &self.desc.gripper).clamped;
        if !j.contains(angles[k]) || gripper_clamped {
            return Err(Rejection::new(
                ErrorCode::LimitViolation,
                format!("joint {} target {:.4} rad outside limits", k + 1, angles[k]),
            ));
        }
        let report = check_limits(&goal, &self.desc);
        if !report.is_empty() {
            return Err(limit_rejection(report));
        }
        let trajectory =
            plan_joint_move_scaled(&self.setpoint, &goal, &self.desc, self.speed_scale)
                .map_err(|e| rejection_for(&e))?;
        self.active = Some(Active {
            trajectory,
            elapsed: 0.0,
            mode: Mode::Jog,
            target_ticks: target,
        });
        self.mode = Mode::Jog;
        self.settle_time = 0.0;
        Ok(())
    }

    fn start_trajectory(&mut self, cmd: &Command) -> Result<(), Rejection> {
        let trajectory = plan_command(&self.desc, &self.setpoint, cmd, self.speed_scale)?;
        let angles = actuator_angles(&trajectory.goal(), &self.desc);
        let target_ticks = core::array::from_fn(|k| self.desc.joints[k].angle_to_ticks(angles[k]));
        self.active = Some(Active {
            trajectory,
            elapsed: 0.0,
            mode: Mode::Trajectory,
            target_ticks,
        });
        self.mode = Mode::Trajectory;
        self.settle_time = 0.0;
        Ok(())
    }

    /// Samples the active trajectory and sends the goals.
    fn stream(&mut self, dt: f64) -> Result<(), BusError> {
        let Some(active) = self.active.as_mut() else {
            return Ok(());
        };
        active.elapsed += dt;
        let (q, _) = active.trajectory.sample(active.elapsed);
        let done = active.elapsed >= active.trajectory.duration();
        self.setpoint = q;
        let angles = actuator_angles(&q, &self.desc);
        for (k, angle) in angles.iter().enumerate() {
            let (lo, hi) = self.tick_bounds[k];
            self.goal_ticks[k] = self.desc.joints[k].angle_to_ticks(*angle).clamp(lo, hi);
        }
        if done {
            self.active = None;
        }
        let data: Vec<[u8; 4]> = self.goal_ticks.iter().map(|t| t.to_le_bytes()).collect();
        self.bus.sync_write(
            reg::GOAL_POSITION.address,
            4,
            self.ids.iter().zip(&data).map(|(&id, d)| (id, &d[..])),
        )?;
        self.stats.goal_writes += 1;
        Ok(())
    }

    fn read_back(&mut self) -> Result<(), BusError> {
        for k in 0..JOINT_COUNT {
            let (moving, present) = read_status(&mut self.bus, self.ids[k])?;
            self.moving[k] = moving;
            self.present[k] = present;
        }
        Ok(())
    }

    fn enter_fault(&mut self, e: BusError) {
        warn!("bus fault: {e}; disabling torque");
        self.stats.faults += 1;
        self.mode = Mode::Fault;
        self.fault = Some(e.to_string());
        self.active = None;
        let off = [0u8];
        let _ = self.bus.sync_write(
            reg::TORQUE_ENABLE.address,
            1,
            self.ids.iter().map(|&id| (id, &off[..])),
        );
    }

    /// Re-arms the servos where they stand. Fails, leaving the fault in
    /// place, if the bus still does not answer.
    fn clear_fault(&mut self) -> Result<(), Rejection> {
        let fail = |e: BusError| Rejection::new(ErrorCode::Fault, e.to_string());
        self.read_back().map_err(fail)?;
        let angles: [f64; JOINT_COUNT] =
            core::array::from_fn(|k| self.desc.joints[k].ticks_to_angle(self.present[k]));
        for (k, j) in self.desc.joints.iter().enumerate() {
            if !j.contains(angles[k]) {
                return Err(Rejection::new(
                    ErrorCode::LimitViolation,
                    format!("joint {} rests outside its limits", k + 1),
                ));
            }
        }
        for k in 0..JOINT_COUNT {
            let id = self.ids[k];
            self.bus
                .write(
                    id,
                    reg::GOAL_POSITION.address,
                    &self.present[k].to_le_bytes(),
                )
                .map_err(fail)?;
            self.bus
                .write(id, reg::TORQUE_ENABLE.address, &[1])
                .map_err(fail)?;
        }
        self.goal_ticks = self.present;
        self.setpoint = joints_from_actuators(&angles, &self.desc);
        self.fault = None;
        self.mode = Mode::Idle;
        Ok(())
    }

    fn state(&mut self) -> RobotState {
        self.seq += 1;
        let angles: [f64; JOINT_COUNT] =
            core::array::from_fn(|k| self.desc.joints[k].ticks_to_angle(self.present[k]));
        let joints = joints_from_actuators(&angles, &self.desc);
        RobotState {
            v: WIRE_VERSION,
            seq: self.seq,
            t: (self.time * 1000.0).round() as u64,
            ticks: self.present,
            q: joints.q,
            w: joints.w,
            pose: forward(&joints, &self.desc).into(),
            moving: self.moving,
            mode: self.mode,
            cmd_seq: self.cmd_seq,
            speed_scale: self.speed_scale,
            fault: self.fault.clone(),
        }
    }
}

/// Reads Moving and PresentPosition of one servo in a single request.
fn read_status<T: Transport>(bus: &mut BusMaster<T>, id: u8) -> Result<(bool, i32), BusError> {
    let b = bus.read(id, STATUS_BLOCK, STATUS_BLOCK_LEN)?;
    let at = usize::from(reg::PRESENT_POSITION.address - STATUS_BLOCK);
    let present = i32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]);
    Ok((b[0] != 0, present))
}
