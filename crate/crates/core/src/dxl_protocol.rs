//! Dynamixel Protocol 2.0 framing.
//!
//! Wire layout of every frame:
//!
//! ```text
//! FF FF FD 00 | ID | LEN_L LEN_H | INSTR | payload (stuffed) | CRC_L CRC_H
//! ```
//!
//! `LEN` counts the instruction byte, the stuffed payload and the CRC. The
//! CRC-16 (polynomial 0x8005, init 0, no reflection) covers everything from
//! the header up to the last payload byte. Inside the payload any `FF FF FD`
//! run is followed by an extra `FD` so the header never appears mid-frame.
//! Status frames use instruction `0x55` and carry the error byte as the
//! first payload byte.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use thiserror::Error;

pub const HEADER: [u8; 4] = [0xFF, 0xFF, 0xFD, 0x00];
pub const BROADCAST_ID: u8 = 0xFE;
pub const MAX_ID: u8 = 0xFD;
pub const STATUS_INSTRUCTION: u8 = 0x55;
/// Largest parameter block an instruction packet may carry.
pub const MAX_PARAMS: usize = 65_528;
/// Frames longer than this (header through CRC) are treated as noise.
pub const MAX_FRAME_LEN: usize = 1024;

const PREFIX_LEN: usize = 7;
const CRC_LEN: usize = 2;
const MAX_DIAGNOSTICS: usize = 64;

const CRC_POLY: u16 = 0x8005;

const fn crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ CRC_POLY
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u16; 256] = crc_table();

/// Table-driven Protocol 2.0 CRC-16.
pub fn crc16(bytes: &[u8]) -> u16 {
    crc16_update(0, bytes)
}

pub fn crc16_update(crc: u16, bytes: &[u8]) -> u16 {
    bytes.iter().fold(crc, |crc, &b| {
        let idx = ((crc >> 8) as u8 ^ b) as usize;
        (crc << 8) ^ CRC_TABLE[idx]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[non_exhaustive]
#[repr(u8)]
pub enum Instruction {
    Ping = 0x01,
    Read = 0x02,
    Write = 0x03,
    SyncWrite = 0x83,
}

impl Instruction {
    pub fn allows_broadcast(self) -> bool {
        matches!(self, Instruction::Ping | Instruction::SyncWrite)
    }
}

impl TryFrom<u8> for Instruction {
    type Error = u8;

    fn try_from(b: u8) -> Result<Self, u8> {
        Ok(match b {
            0x01 => Instruction::Ping,
            0x02 => Instruction::Read,
            0x03 => Instruction::Write,
            0x83 => Instruction::SyncWrite,
            other => return Err(other),
        })
    }
}

/// Error codes carried in the low 7 bits of a status packet's error byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StatusError {
    ResultFail = 0x01,
    Instruction = 0x02,
    Crc = 0x03,
    DataRange = 0x04,
    DataLength = 0x05,
    DataLimit = 0x06,
    Access = 0x07,
}

pub const ALERT_BIT: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionPacket {
    pub id: u8,
    pub instruction: Instruction,
    pub params: Vec<u8>,
}

impl InstructionPacket {
    pub fn ping(id: u8) -> Self {
        Self {
            id,
            instruction: Instruction::Ping,
            params: Vec::new(),
        }
    }

    pub fn read(id: u8, address: u16, length: u16) -> Self {
        let mut params = Vec::with_capacity(4);
        params.extend_from_slice(&address.to_le_bytes());
        params.extend_from_slice(&length.to_le_bytes());
        Self {
            id,
            instruction: Instruction::Read,
            params,
        }
    }

    pub fn write(id: u8, address: u16, data: &[u8]) -> Self {
        let mut params = Vec::with_capacity(2 + data.len());
        params.extend_from_slice(&address.to_le_bytes());
        params.extend_from_slice(data);
        Self {
            id,
            instruction: Instruction::Write,
            params,
        }
    }

    /// Broadcast write of `length` bytes at `address` with per-servo data.
    /// Every data slice must be exactly `length` bytes.
    pub fn sync_write<'a>(
        address: u16,
        length: u16,
        entries: impl IntoIterator<Item = (u8, &'a [u8])>,
    ) -> Self {
        let mut params = Vec::new();
        params.extend_from_slice(&address.to_le_bytes());
        params.extend_from_slice(&length.to_le_bytes());
        for (id, data) in entries {
            debug_assert_eq!(data.len(), usize::from(length));
            params.push(id);
            params.extend_from_slice(data);
        }
        Self {
            id: BROADCAST_ID,
            instruction: Instruction::SyncWrite,
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusPacket {
    pub id: u8,
    pub error: u8,
    pub params: Vec<u8>,
}

impl StatusPacket {
    pub fn ok(id: u8, params: Vec<u8>) -> Self {
        Self {
            id,
            error: 0,
            params,
        }
    }

    pub fn error(id: u8, code: StatusError) -> Self {
        Self {
            id,
            error: code as u8,
            params: Vec::new(),
        }
    }

    pub fn alert(&self) -> bool {
        self.error & ALERT_BIT != 0
    }

    pub fn error_code(&self) -> u8 {
        self.error & !ALERT_BIT
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Instruction(InstructionPacket),
    Status(StatusPacket),
}

impl Packet {
    pub fn id(&self) -> u8 {
        match self {
            Packet::Instruction(p) => p.id,
            Packet::Status(p) => p.id,
        }
    }
}

impl From<InstructionPacket> for Packet {
    fn from(p: InstructionPacket) -> Self {
        Packet::Instruction(p)
    }
}

impl From<StatusPacket> for Packet {
    fn from(p: StatusPacket) -> Self {
        Packet::Status(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("invalid packet id {0:#04x}")]
    InvalidId(u8),
    #[error("instruction {0:?} cannot be broadcast")]
    BroadcastNotAllowed(Instruction),
    #[error("packet too large: {0} parameter bytes")]
    Oversize(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame does not start with the FF FF FD 00 header")]
    BadHeader,
    #[error("frame truncated")]
    Truncated,
    #[error("length field {declared} does not match frame size {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("crc mismatch: frame says {received:#06x}, computed {computed:#06x}")]
    Crc { received: u16, computed: u16 },
    #[error("unsupported instruction {0:#04x}")]
    UnknownInstruction(u8),
}

fn stuff_into(out: &mut Vec<u8>, data: &[u8]) {
    let mut ff_run = 0usize;
    for &b in data {
        out.push(b);
        match b {
            0xFD if ff_run >= 2 => {
                out.push(0xFD);
                ff_run = 0;
            }
            0xFF => ff_run += 1,
            _ => ff_run = 0,
        }
    }
}

fn unstuff(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    let mut ff_run = 0usize;
    let mut iter = data.iter().copied().peekable();
    while let Some(b) = iter.next() {
        out.push(b);
        match b {
            0xFD if ff_run >= 2 => {
                if iter.peek() == Some(&0xFD) {
                    iter.next();
                }
                ff_run = 0;
            }
            0xFF => ff_run += 1,
            _ => ff_run = 0,
        }
    }
    out
}

fn frame(id: u8, instruction: u8, payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(PREFIX_LEN + 1 + payload.len() + payload.len() / 8 + CRC_LEN);
    out.extend_from_slice(&HEADER);
    out.push(id);
    out.extend_from_slice(&[0, 0]);
    out.push(instruction);
    stuff_into(&mut out, payload);
    let len = out.len() - PREFIX_LEN + CRC_LEN;
    let len = u16::try_from(len).map_err(|_| EncodeError::Oversize(payload.len()))?;
    out[5..7].copy_from_slice(&len.to_le_bytes());
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serializes an instruction packet into a complete frame.
pub fn encode(p: &InstructionPacket) -> Result<Vec<u8>, EncodeError> {
    match p.id {
        BROADCAST_ID if !p.instruction.allows_broadcast() => {
            return Err(EncodeError::BroadcastNotAllowed(p.instruction))
        }
        0..=MAX_ID | BROADCAST_ID => {}
        other => return Err(EncodeError::InvalidId(other)),
    }
    if p.params.len() > MAX_PARAMS {
        return Err(EncodeError::Oversize(p.params.len()));
    }
    frame(p.id, p.instruction as u8, &p.params)
}

pub fn encode_status(p: &StatusPacket) -> Result<Vec<u8>, EncodeError> {
    if p.id > MAX_ID {
        return Err(EncodeError::InvalidId(p.id));
    }
    if p.params.len() > MAX_PARAMS {
        return Err(EncodeError::Oversize(p.params.len()));
    }
    let mut payload = Vec::with_capacity(1 + p.params.len());
    payload.push(p.error);
    payload.extend_from_slice(&p.params);
    frame(p.id, STATUS_INSTRUCTION, &payload)
}

pub fn encode_packet(p: &Packet) -> Result<Vec<u8>, EncodeError> {
    match p {
        Packet::Instruction(i) => encode(i),
        Packet::Status(s) => encode_status(s),
    }
}

/// Parses one complete frame (header through CRC, nothing else).
pub fn decode(frame: &[u8]) -> Result<Packet, DecodeError> {
    if frame.len() < PREFIX_LEN {
        return Err(DecodeError::Truncated);
    }
    if frame[..4] != HEADER {
        return Err(DecodeError::BadHeader);
    }
    let declared = usize::from(u16::from_le_bytes([frame[5], frame[6]]));
    if declared < 3 || PREFIX_LEN + declared != frame.len() {
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: frame.len(),
        });
    }
    let body_end = frame.len() - CRC_LEN;
    let received = u16::from_le_bytes([frame[body_end], frame[body_end + 1]]);
    let computed = crc16(&frame[..body_end]);
    if received != computed {
        return Err(DecodeError::Crc { received, computed });
    }
    let id = frame[4];
    let instruction = frame[PREFIX_LEN];
    let payload = unstuff(&frame[PREFIX_LEN + 1..body_end]);
    if instruction == STATUS_INSTRUCTION {
        let (&error, params) = payload.split_first().ok_or(DecodeError::Truncated)?;
        return Ok(Packet::Status(StatusPacket {
            id,
            error,
            params: params.to_vec(),
        }));
    }
    let instruction =
        Instruction::try_from(instruction).map_err(DecodeError::UnknownInstruction)?;
    Ok(Packet::Instruction(InstructionPacket {
        id,
        instruction,
        params: payload,
    }))
}

/// Something the framer dropped instead of emitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameDiagnostic {
    CrcMismatch {
        id: u8,
        received: u16,
        computed: u16,
    },
    BadLength {
        declared: usize,
    },
    Rejected {
        id: u8,
        error: DecodeError,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FramerStats {
    pub frames: u64,
    pub crc_errors: u64,
    pub discarded_bytes: u64,
}

/// Incremental frame extractor for a raw byte stream.
///
/// Bytes can arrive in arbitrary chunks; the packets produced do not depend
/// on how the stream was split. The internal buffer never exceeds
/// [`MAX_FRAME_LEN`].
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
    diagnostics: VecDeque<FrameDiagnostic>,
    stats: FramerStats,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pushes bytes and returns every frame completed by them, in order.
    pub fn feed(&mut self, mut bytes: &[u8]) -> Vec<Packet> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let room = MAX_FRAME_LEN - self.buf.len();
            let (head, rest) = bytes.split_at(room.min(bytes.len()));
            self.buf.extend_from_slice(head);
            bytes = rest;
            self.process(&mut out);
        }
        out
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn stats(&self) -> FramerStats {
        self.stats
    }

    pub fn drain_diagnostics(&mut self) -> impl Iterator<Item = FrameDiagnostic> + '_ {
        self.diagnostics.drain(..)
    }

    pub fn clear(&mut self) {
        self.stats.discarded_bytes += self.buf.len() as u64;
        self.buf.clear();
    }

    fn report(&mut self, d: FrameDiagnostic) {
        if self.diagnostics.len() == MAX_DIAGNOSTICS {
            self.diagnostics.pop_front();
        }
        self.diagnostics.push_back(d);
    }

    fn discard(&mut self, n: usize) {
        self.buf.drain(..n);
        self.stats.discarded_bytes += n as u64;
    }

    fn process(&mut self, out: &mut Vec<Packet>) {
        loop {
            match self.buf.windows(HEADER.len()).position(|w| w == HEADER) {
                Some(0) => {}
                Some(i) => self.discard(i),
                None => {
                    // keep a possible partial header at the tail
                    let keep = self.buf.len().min(HEADER.len() - 1);
                    self.discard(self.buf.len() - keep);
                    return;
                }
            }
            if self.buf.len() < PREFIX_LEN {
                return;
            }
            let declared = usize::from(u16::from_le_bytes([self.buf[5], self.buf[6]]));
            let total = PREFIX_LEN + declared;
            if declared < 3 || total > MAX_FRAME_LEN {
                self.report(FrameDiagnostic::BadLength { declared });
                self.discard(1);
                continue;
            }
            if self.buf.len() < total {
                return;
            }
            match decode(&self.buf[..total]) {
                Ok(p) => {
                    self.stats.frames += 1;
                    out.push(p);
                    self.buf.drain(..total);
                }
                Err(DecodeError::Crc { received, computed }) => {
                    self.stats.crc_errors += 1;
                    let id = self.buf[4];
                    self.report(FrameDiagnostic::CrcMismatch {
                        id,
                        received,
                        computed,
                    });
                    self.discard(1);
                }
                Err(error) => {
                    let id = self.buf[4];
                    self.report(FrameDiagnostic::Rejected { id, error });
                    self.discard(total);
                }
            }
        }
    }
}
