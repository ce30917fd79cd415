//! A virtual bus of XL430-class servos that answers real Protocol 2.0 frames.
//!
//! Each servo keeps a control table and moves toward its goal at a constant
//! speed set by `ProfileVelocity`. There is no acceleration shaping here;
//! smooth motion is the planner's job.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use thiserror::Error;

use crate::dxl_protocol::{
    encode_status, FrameBuffer, FrameDiagnostic, Instruction, InstructionPacket, Packet,
    StatusError, StatusPacket, BROADCAST_ID, MAX_ID,
};
use crate::robot_model::RobotDescription;

/// Bytes in the simulated control table (EEPROM + RAM area).
pub const TABLE_SIZE: usize = 147;
const MAX_LOG: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadOnly,
    ReadWrite,
    /// Writable only while torque is off.
    Eeprom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Register {
    pub address: u16,
    pub size: u16,
    pub access: Access,
}

impl Register {
    const fn new(address: u16, size: u16, access: Access) -> Self {
        Self {
            address,
            size,
            access,
        }
    }

    fn end(&self) -> u16 {
        self.address + self.size
    }
}

/// Register map, addresses per the XL430 control table.
pub mod reg {
    use super::{Access, Register};

    pub const MODEL_NUMBER: Register = Register::new(0, 2, Access::ReadOnly);
    pub const FIRMWARE_VERSION: Register = Register::new(6, 1, Access::ReadOnly);
    pub const ID: Register = Register::new(7, 1, Access::ReadOnly);
    pub const OPERATING_MODE: Register = Register::new(11, 1, Access::Eeprom);
    pub const TORQUE_ENABLE: Register = Register::new(64, 1, Access::ReadWrite);
    pub const LED: Register = Register::new(65, 1, Access::ReadWrite);
    pub const PROFILE_VELOCITY: Register = Register::new(112, 4, Access::ReadWrite);
    pub const GOAL_POSITION: Register = Register::new(116, 4, Access::ReadWrite);
    pub const MOVING: Register = Register::new(122, 1, Access::ReadOnly);
    pub const PRESENT_POSITION: Register = Register::new(132, 4, Access::ReadOnly);

    pub const ALL: [Register; 10] = [
        MODEL_NUMBER,
        FIRMWARE_VERSION,
        ID,
        OPERATING_MODE,
        TORQUE_ENABLE,
        LED,
        PROFILE_VELOCITY,
        GOAL_POSITION,
        MOVING,
        PRESENT_POSITION,
    ];
}

pub const POSITION_CONTROL_MODE: u8 = 3;
pub const XL430_MODEL_NUMBER: u16 = 1060;

/// Behavior knobs for the simulated servos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub ticks_per_rev: u32,
    /// Unit of `ProfileVelocity`, rev/min per LSB.
    pub velocity_unit_rpm: f64,
    /// Initial `PresentPosition` and `GoalPosition`.
    pub initial_position: i32,
    /// Answer goal writes with an access error while torque is off, instead
    /// of storing them.
    pub reject_goal_without_torque: bool,
    pub model_number: u16,
    pub firmware_version: u8,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ticks_per_rev: 4096,
            velocity_unit_rpm: 0.229,
            initial_position: 2048,
            reject_goal_without_torque: false,
            model_number: XL430_MODEL_NUMBER,
            firmware_version: 46,
        }
    }
}

impl SimConfig {
    /// Ticks per second for one `ProfileVelocity` LSB.
    pub fn ticks_per_s_per_unit(&self) -> f64 {
        self.velocity_unit_rpm * f64::from(self.ticks_per_rev) / 60.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlTable {
    bytes: [u8; TABLE_SIZE],
}

impl ControlTable {
    fn new(id: u8, cfg: &SimConfig) -> Self {
        let mut t = Self {
            bytes: [0; TABLE_SIZE],
        };
        t.set(reg::MODEL_NUMBER, i64::from(cfg.model_number));
        t.set(reg::FIRMWARE_VERSION, i64::from(cfg.firmware_version));
        t.set(reg::ID, i64::from(id));
        t.set(reg::OPERATING_MODE, i64::from(POSITION_CONTROL_MODE));
        t.set(reg::GOAL_POSITION, i64::from(cfg.initial_position));
        t.set(reg::PRESENT_POSITION, i64::from(cfg.initial_position));
        t
    }

    /// Register value, sign-extended for the 4-byte position registers.
    pub fn get(&self, r: Register) -> i64 {
        let s = &self.bytes[usize::from(r.address)..usize::from(r.end())];
        match r.size {
            1 => i64::from(s[0]),
            2 => i64::from(u16::from_le_bytes([s[0], s[1]])),
            _ => i64::from(i32::from_le_bytes([s[0], s[1], s[2], s[3]])),
        }
    }

    fn set(&mut self, r: Register, v: i64) {
        let s = &mut self.bytes[usize::from(r.address)..usize::from(r.end())];
        match r.size {
            1 => s[0] = v as u8,
            2 => s.copy_from_slice(&(v as u16).to_le_bytes()),
            _ => s.copy_from_slice(&(v as i32).to_le_bytes()),
        }
    }

    pub fn read(&self, address: u16, len: u16) -> Result<&[u8], StatusError> {
        if len == 0 {
            return Err(StatusError::DataLength);
        }
        let end = usize::from(address) + usize::from(len);
        if end > TABLE_SIZE {
            return Err(StatusError::DataRange);
        }
        Ok(&self.bytes[usize::from(address)..end])
    }

    /// Registers fully covered by a write, or the error the servo answers.
    fn registers_for_write(&self, address: u16, len: usize) -> Result<Vec<Register>, StatusError> {
        if len == 0 {
            return Err(StatusError::DataLength);
        }
        let end = usize::from(address) + len;
        if end > TABLE_SIZE {
            return Err(StatusError::DataRange);
        }
        let mut regs = Vec::new();
        let mut cursor = usize::from(address);
        while cursor < end {
            let r = reg::ALL
                .iter()
                .find(|r| usize::from(r.address) <= cursor && cursor < usize::from(r.end()))
                .ok_or(StatusError::Access)?;
            if usize::from(r.address) != cursor || usize::from(r.end()) > end {
                return Err(StatusError::DataLength);
            }
            regs.push(*r);
            cursor = usize::from(r.end());
        }
        Ok(regs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualServo {
    table: ControlTable,
    /// Continuous position in ticks; `PresentPosition` is its rounding.
    position: f64,
}

impl VirtualServo {
    fn new(id: u8, cfg: &SimConfig) -> Self {
        Self {
            table: ControlTable::new(id, cfg),
            position: f64::from(cfg.initial_position),
        }
    }

    pub fn table(&self) -> &ControlTable {
        &self.table
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    pub fn present_position(&self) -> i32 {
        self.table.get(reg::PRESENT_POSITION) as i32
    }

    pub fn goal_position(&self) -> i32 {
        self.table.get(reg::GOAL_POSITION) as i32
    }

    pub fn torque_enabled(&self) -> bool {
        self.table.get(reg::TORQUE_ENABLE) != 0
    }

    pub fn moving(&self) -> bool {
        self.table.get(reg::MOVING) != 0
    }

    fn write(&mut self, address: u16, data: &[u8], cfg: &SimConfig) -> Result<(), StatusError> {
        let regs = self.table.registers_for_write(address, data.len())?;
        let torque_on = self.torque_enabled();
        let mut offset = 0;
        for r in &regs {
            let chunk = &data[offset..offset + usize::from(r.size)];
            offset += usize::from(r.size);
            let value = match r.size {
                1 => i64::from(chunk[0]),
                _ => i64::from(i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]])),
            };
            match r.access {
                Access::ReadOnly => return Err(StatusError::Access),
                Access::Eeprom if torque_on => return Err(StatusError::Access),
                _ => {}
            }
            let in_range = match *r {
                reg::OPERATING_MODE => value == i64::from(POSITION_CONTROL_MODE),
                reg::TORQUE_ENABLE | reg::LED => value <= 1,
                reg::PROFILE_VELOCITY => (0..=32_767).contains(&value),
                reg::GOAL_POSITION => (0..i64::from(cfg.ticks_per_rev)).contains(&value),
                _ => true,
            };
            if !in_range {
                return Err(StatusError::DataRange);
            }
            if *r == reg::GOAL_POSITION && cfg.reject_goal_without_torque {
                // a goal write is only rejected when torque is still off
                // after the rest of this write has been applied
                let enables = regs.contains(&reg::TORQUE_ENABLE)
                    && data[usize::from(reg::TORQUE_ENABLE.address - address)] == 1;
                if !torque_on && !enables {
                    return Err(StatusError::Access);
                }
            }
        }
        let start = usize::from(address);
        self.table.bytes[start..start + data.len()].copy_from_slice(data);
        if !self.torque_enabled() {
            self.table.set(reg::MOVING, 0);
        }
        Ok(())
    }

    fn step(&mut self, dt: f64, cfg: &SimConfig) {
        if !self.torque_enabled() {
            self.table.set(reg::MOVING, 0);
            return;
        }
        let goal = f64::from(self.goal_position());
        let remaining = goal - self.position;
        let pv = self.table.get(reg::PROFILE_VELOCITY);
        if pv == 0 {
            self.position = goal;
        } else {
            let max_step = pv as f64 * cfg.ticks_per_s_per_unit() * dt;
            if remaining.abs() <= max_step {
                self.position = goal;
            } else {
                self.position += max_step.copysign(remaining);
            }
        }
        let present = libm::round(self.position) as i64;
        self.table.set(reg::PRESENT_POSITION, present);
        let moving = (goal - present as f64).abs() > 1.0;
        self.table.set(reg::MOVING, i64::from(moving));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("servo id {0} is used twice")]
    DuplicateId(u8),
    #[error("servo id {0} is not addressable")]
    InvalidId(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusEvent {
    Handled { id: u8, instruction: Instruction },
    Failed { id: u8, error: StatusError },
    Framing(FrameDiagnostic),
    MalformedSyncWrite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusStats {
    pub instructions: u64,
    pub pings: u64,
    pub reads: u64,
    pub writes: u64,
    pub sync_writes: u64,
    /// Individual servo goal updates, from Write or SyncWrite.
    pub goal_writes: u64,
    pub responses: u64,
}

/// Daisy-chained servos behind a single connector.
#[derive(Debug)]
pub struct VirtualBus {
    servos: BTreeMap<u8, VirtualServo>,
    config: SimConfig,
    framer: FrameBuffer,
    log: VecDeque<BusEvent>,
    stats: BusStats,
}

impl VirtualBus {
    pub fn new(ids: impl IntoIterator<Item = u8>, config: SimConfig) -> Result<Self, SimError> {
        let mut servos = BTreeMap::new();
        for id in ids {
            if id > MAX_ID {
                return Err(SimError::InvalidId(id));
            }
            if servos.insert(id, VirtualServo::new(id, &config)).is_some() {
                return Err(SimError::DuplicateId(id));
            }
        }
        Ok(Self {
            servos,
            config,
            framer: FrameBuffer::new(),
            log: VecDeque::new(),
            stats: BusStats::default(),
        })
    }

    /// One servo per joint of the description, on its configured motor ID.
    pub fn from_description(d: &RobotDescription) -> Result<Self, SimError> {
        Self::new(d.motor_ids(), SimConfig::default())
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn servo(&self, id: u8) -> Option<&VirtualServo> {
        self.servos.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.servos.keys().copied()
    }

    pub fn stats(&self) -> BusStats {
        self.stats
    }

    pub fn events(&self) -> impl Iterator<Item = &BusEvent> {
        self.log.iter()
    }

    fn record(&mut self, e: BusEvent) {
        if self.log.len() == MAX_LOG {
            self.log.pop_front();
        }
        self.log.push_back(e);
    }

    /// Consumes raw bus bytes and returns the bytes the servos send back.
    /// Partial frames are kept until the rest arrives; noise is dropped.
    pub fn handle(&mut self, frame_bytes: &[u8]) -> Vec<u8> {
        let packets = self.framer.feed(frame_bytes);
        let diagnostics: Vec<_> = self.framer.drain_diagnostics().collect();
        for d in diagnostics {
            self.record(BusEvent::Framing(d));
        }
        let mut out = Vec::new();
        for p in packets {
            // status frames from other devices are not for us
            if let Packet::Instruction(p) = p {
                for status in self.execute(&p) {
                    self.stats.responses += 1;
                    out.extend(encode_status(&status).expect("status frames are small"));
                }
            }
        }
        out
    }

    fn execute(&mut self, p: &InstructionPacket) -> Vec<StatusPacket> {
        self.stats.instructions += 1;
        let targets: Vec<u8> = match p.id {
            BROADCAST_ID => self.servos.keys().copied().collect(),
            id if self.servos.contains_key(&id) => alloc::vec![id],
            _ => Vec::new(),
        };
        match p.instruction {
            Instruction::Ping => {
                self.stats.pings += 1;
                targets
                    .into_iter()
                    .map(|id| {
                        self.record(BusEvent::Handled {
                            id,
                            instruction: Instruction::Ping,
                        });
                        let t = &self.servos[&id].table;
                        let mut params = Vec::with_capacity(3);
                        params.extend_from_slice(&(t.get(reg::MODEL_NUMBER) as u16).to_le_bytes());
                        params.push(t.get(reg::FIRMWARE_VERSION) as u8);
                        StatusPacket::ok(id, params)
                    })
                    .collect()
            }
            Instruction::Read if p.id != BROADCAST_ID => {
                self.stats.reads += 1;
                targets
                    .into_iter()
                    .map(|id| {
                        let result = match p.params[..] {
                            [a0, a1, l0, l1] => self.servos[&id]
                                .table
                                .read(u16::from_le_bytes([a0, a1]), u16::from_le_bytes([l0, l1]))
                                .map(<[u8]>::to_vec),
                            _ => Err(StatusError::DataLength),
                        };
                        self.status_for(id, Instruction::Read, result)
                    })
                    .collect()
            }
            Instruction::Write if p.id != BROADCAST_ID => {
                self.stats.writes += 1;
                targets
                    .into_iter()
                    .map(|id| {
                        let result = if p.params.len() < 3 {
                            Err(StatusError::DataLength)
                        } else {
                            let address = u16::from_le_bytes([p.params[0], p.params[1]]);
                            self.write_servo(id, address, &p.params[2..])
                        };
                        self.status_for(id, Instruction::Write, result.map(|()| Vec::new()))
                    })
                    .collect()
            }
            Instruction::SyncWrite if p.id == BROADCAST_ID => {
                self.stats.sync_writes += 1;
                self.sync_write(&p.params);
                Vec::new()
            }
            // non-broadcast SyncWrite or broadcast Read/Write
            _ => Vec::new(),
        }
    }

    fn write_servo(&mut self, id: u8, address: u16, data: &[u8]) -> Result<(), StatusError> {
        let cfg = self.config;
        let servo = self.servos.get_mut(&id).expect("target exists");
        servo.write(address, data, &cfg)?;
        let touches_goal = address <= reg::GOAL_POSITION.address
            && usize::from(address) + data.len() >= usize::from(reg::GOAL_POSITION.end());
        if touches_goal {
            self.stats.goal_writes += 1;
        }
        Ok(())
    }

    fn status_for(
        &mut self,
        id: u8,
        instruction: Instruction,
        result: Result<Vec<u8>, StatusError>,
    ) -> StatusPacket {
        match result {
            Ok(params) => {
                self.record(BusEvent::Handled { id, instruction });
                StatusPacket::ok(id, params)
            }
            Err(error) => {
                self.record(BusEvent::Failed { id, error });
                StatusPacket::error(id, error)
            }
        }
    }

    fn sync_write(&mut self, params: &[u8]) {
        let [a0, a1, l0, l1, rest @ ..] = params else {
            self.record(BusEvent::MalformedSyncWrite);
            return;
        };
        let address = u16::from_le_bytes([*a0, *a1]);
        let len = usize::from(u16::from_le_bytes([*l0, *l1]));
        if len == 0 || rest.len() % (len + 1) != 0 {
            self.record(BusEvent::MalformedSyncWrite);
            return;
        }
        for chunk in rest.chunks_exact(len + 1) {
            let id = chunk[0];
            if !self.servos.contains_key(&id) {
                continue;
            }
            match self.write_servo(id, address, &chunk[1..]) {
                Ok(()) => self.record(BusEvent::Handled {
                    id,
                    instruction: Instruction::SyncWrite,
                }),
                Err(error) => self.record(BusEvent::Failed { id, error }),
            }
        }
    }

    /// Advances every servo by `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        let cfg = self.config;
        for s in self.servos.values_mut() {
            s.step(dt, &cfg);
        }
    }
}
