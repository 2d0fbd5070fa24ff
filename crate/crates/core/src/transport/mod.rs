//! Framed stream connections.
//!
//! Every connection carries length-prefixed frames: a 4-byte big-endian byte
//! count followed by the payload bytes. The same framing runs over in-memory
//! serial pairs ([`pipe`]), loopback TCP ([`tcp`]) and the serial-over-TCP
//! [`bridge`].

pub mod bridge;
pub mod pipe;
pub mod tcp;

use std::time::Duration;

use thiserror::Error;

use crate::model::{BitPayload, Protocol};

pub use bridge::{open_emulated_link, EmulatedBridge, EmulatedLink, Relay, TunnelKind};
pub use pipe::{open_virtual_serial_pair, pipe_pair, PipeEndpoint, SerialPair};
pub use tcp::{bind, loopback_pair, TcpConnection};

use crate::sched::ClockMode;

/// Largest accepted payload, in bytes.
pub const MAX_FRAME_LEN: usize = 1 << 20;
pub const FRAME_HEADER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    ConnectionClosed,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("no more virtual serial pairs available")]
    ResourceExhausted,
    #[error("tunnel broken")]
    TunnelBroken,
    #[error("failed to bind {addr}: {error}")]
    PortBindFailed { addr: String, error: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TransportError {
    pub fn is_closed(&self) -> bool {
        matches!(self, Self::ConnectionClosed | Self::TunnelBroken)
    }
}

pub fn encode_frame(payload: &BitPayload) -> Result<Vec<u8>, TransportError> {
    let len = payload.as_bytes().len();
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut wire = Vec::with_capacity(FRAME_HEADER_LEN + len);
    wire.extend_from_slice(&(len as u32).to_be_bytes());
    wire.extend_from_slice(payload.as_bytes());
    Ok(wire)
}

/// Both ends of one link.
pub type LinkPair = (Box<dyn Connection>, Box<dyn Connection>);

/// A TCP-tagged link between two named parties. Lockstep runs use an
/// in-memory pipe; wall-clock runs listen on `addr` and connect over loopback.
/// The first connection is the listening (server) side.
pub fn open_tcp_link(
    mode: ClockMode,
    addr: &str,
    server_name: &str,
    client_name: &str,
) -> Result<LinkPair, TransportError> {
    match mode {
        ClockMode::Lockstep => {
            let (a, b) = pipe_pair(Protocol::Tcp, server_name, client_name, pipe::DEFAULT_PIPE_CAPACITY);
            Ok((Box::new(a), Box::new(b)))
        }
        ClockMode::Wall => {
            let listener = bind(addr)?;
            let client = TcpConnection::connect(listener.local_addr()?)?;
            let server = TcpConnection::accept(&listener, Duration::from_secs(5))?;
            Ok((Box::new(server), Box::new(client)))
        }
    }
}

/// Incremental frame parser for byte streams.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Pops the next complete frame, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<BitPayload>, TransportError> {
        if self.buf.len() < FRAME_HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME_LEN {
            return Err(TransportError::FrameTooLarge(len));
        }
        if self.buf.len() < FRAME_HEADER_LEN + len {
            return Ok(None);
        }
        let payload = self.buf[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec();
        self.buf.drain(..FRAME_HEADER_LEN + len);
        Ok(Some(BitPayload::new(payload)))
    }
}

/// A bidirectional framed connection with one reader and one writer.
pub trait Connection: Send {
    fn protocol(&self) -> Protocol;

    /// Identifier of the remote endpoint.
    fn peer(&self) -> &str;

    fn write_frame(&mut self, payload: &BitPayload) -> Result<(), TransportError>;

    /// Returns the next frame without blocking.
    fn try_read_frame(&mut self) -> Result<Option<BitPayload>, TransportError>;

    fn read_frame_timeout(&mut self, timeout: Duration)
        -> Result<Option<BitPayload>, TransportError>;

    /// Blocks until a frame arrives or the peer goes away.
    fn read_frame(&mut self) -> Result<BitPayload, TransportError> {
        loop {
            if let Some(frame) = self.read_frame_timeout(Duration::from_millis(50))? {
                return Ok(frame);
            }
        }
    }

    /// Whether a write would be accepted without waiting on backpressure.
    fn can_write(&self) -> bool {
        true
    }

    fn close(&mut self);
}

impl<C: Connection + ?Sized> Connection for Box<C> {
    fn protocol(&self) -> Protocol {
        (**self).protocol()
    }

    fn peer(&self) -> &str {
        (**self).peer()
    }

    fn write_frame(&mut self, payload: &BitPayload) -> Result<(), TransportError> {
        (**self).write_frame(payload)
    }

    fn try_read_frame(&mut self) -> Result<Option<BitPayload>, TransportError> {
        (**self).try_read_frame()
    }

    fn read_frame_timeout(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<BitPayload>, TransportError> {
        (**self).read_frame_timeout(timeout)
    }

    fn read_frame(&mut self) -> Result<BitPayload, TransportError> {
        (**self).read_frame()
    }

    fn can_write(&self) -> bool {
        (**self).can_write()
    }

    fn close(&mut self) {
        (**self).close()
    }
}
