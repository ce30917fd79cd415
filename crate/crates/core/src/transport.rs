//! Byte transports and a request/response bus master on top of them.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::dxl_protocol::{
    encode, EncodeError, FrameBuffer, InstructionPacket, Packet, StatusPacket,
};
use crate::servo_sim::VirtualBus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transport closed")]
    Closed,
    #[error("transport i/o: {0}")]
    Io(String),
}

/// A half-duplex byte pipe to the servo chain, real or simulated.
pub trait Transport {
    fn write(&mut self, bytes: &[u8]) -> Result<(), TransportError>;

    /// Reads whatever has arrived, waiting at most the transport's own
    /// timeout. `Ok(0)` means nothing arrived in time.
    fn read(&mut self, buf: &mut [u8]) -> Result<usize, TransportError>;

    /// Lets simulated devices advance their clock. Real hardware ignores it.
    fn advance(&mut self, _dt: f64) {}
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn write(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        (**self).write(bytes)
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<usize, TransportError> {
        (**self).read(buf)
    }

    fn advance(&mut self, dt: f64) {
        (**self).advance(dt)
    }
}

impl<T: Transport + ?Sized> Transport for alloc::boxed::Box<T> {
    fn write(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        (**self).write(bytes)
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<usize, TransportError> {
        (**self).read(buf)
    }

    fn advance(&mut self, dt: f64) {
        (**self).advance(dt)
    }
}

/// Transport backed by a [`VirtualBus`]; responses are available
/// immediately after the request is written.
#[derive(Debug)]
pub struct SimTransport {
    bus: VirtualBus,
    rx: VecDeque<u8>,
}

impl SimTransport {
    pub fn new(bus: VirtualBus) -> Self {
        Self {
            bus,
            rx: VecDeque::new(),
        }
    }

    pub fn bus(&self) -> &VirtualBus {
        &self.bus
    }

    pub fn bus_mut(&mut self) -> &mut VirtualBus {
        &mut self.bus
    }
}

impl Transport for SimTransport {
    fn write(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        let reply = self.bus.handle(bytes);
        self.rx.extend(reply);
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<usize, TransportError> {
        let n = buf.len().min(self.rx.len());
        for (dst, src) in buf.iter_mut().zip(self.rx.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }

    fn advance(&mut self, dt: f64) {
        self.bus.step(dt);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("no response from servo {id}")]
    Timeout { id: u8 },
    #[error("servo {id} reported error {error:#04x}")]
    Status { id: u8, error: u8 },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl BusError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, BusError::Timeout { .. })
    }
}

/// Ping answer: model number and firmware version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PingInfo {
    pub model_number: u16,
    pub firmware_version: u8,
}

/// Sends instruction packets and waits for the matching status frames.
#[derive(Debug)]
pub struct BusMaster<T> {
    transport: T,
    framer: FrameBuffer,
    /// Empty reads tolerated before a request times out.
    pub idle_reads: u32,
}

impl<T: Transport> BusMaster<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            framer: FrameBuffer::new(),
            idle_reads: 1,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_inner(self) -> T {
        self.transport
    }

    fn send(&mut self, p: &InstructionPacket) -> Result<(), BusError> {
        let frame = encode(p)?;
        self.transport.write(&frame)?;
        Ok(())
    }

    fn request(&mut self, p: &InstructionPacket) -> Result<StatusPacket, BusError> {
        self.framer.clear();
        self.send(p)?;
        let mut buf = [0u8; 256];
        let mut idle = 0;
        loop {
            let n = self.transport.read(&mut buf)?;
            if n == 0 {
                idle += 1;
                if idle >= self.idle_reads {
                    return Err(BusError::Timeout { id: p.id });
                }
                continue;
            }
            for packet in self.framer.feed(&buf[..n]) {
                // instruction echoes from the half-duplex line are skipped
                if let Packet::Status(s) = packet {
                    if s.id == p.id {
                        if s.error_code() != 0 {
                            return Err(BusError::Status {
                                id: s.id,
                                error: s.error,
                            });
                        }
                        return Ok(s);
                    }
                }
            }
        }
    }

    pub fn ping(&mut self, id: u8) -> Result<PingInfo, BusError> {
        let s = self.request(&InstructionPacket::ping(id))?;
        match s.params[..] {
            [m0, m1, fw, ..] => Ok(PingInfo {
                model_number: u16::from_le_bytes([m0, m1]),
                firmware_version: fw,
            }),
            _ => Err(BusError::Status { id, error: 0 }),
        }
    }

    pub fn read(&mut self, id: u8, address: u16, len: u16) -> Result<Vec<u8>, BusError> {
        let s = self.request(&InstructionPacket::read(id, address, len))?;
        if s.params.len() != usize::from(len) {
            return Err(BusError::Status { id, error: 0 });
        }
        Ok(s.params)
    }

    pub fn write(&mut self, id: u8, address: u16, data: &[u8]) -> Result<(), BusError> {
        self.request(&InstructionPacket::write(id, address, data))
            .map(|_| ())
    }

    /// Broadcast write; no responses are expected.
    pub fn sync_write<'a>(
        &mut self,
        address: u16,
        length: u16,
        entries: impl IntoIterator<Item = (u8, &'a [u8])>,
    ) -> Result<(), BusError> {
        self.send(&InstructionPacket::sync_write(address, length, entries))
    }

    pub fn advance(&mut self, dt: f64) {
        self.transport.advance(dt);
    }
}
