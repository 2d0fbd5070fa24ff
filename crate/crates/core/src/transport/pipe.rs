//! In-process duplex frame pipes. Tagged RS232 they stand in for a pair of
//! virtual serial ports; tagged TCP they serve as the deterministic tunnel in
//! lockstep runs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{encode_frame, Connection, TransportError, FRAME_HEADER_LEN};
use crate::model::{BitPayload, Protocol};

/// Default bound on frames queued per direction before writers block.
pub const DEFAULT_PIPE_CAPACITY: usize = 1024;

/// Bound on simultaneously open virtual serial pairs.
pub const MAX_SERIAL_PAIRS: usize = 4096;

static OPEN_SERIAL_PAIRS: AtomicUsize = AtomicUsize::new(0);

#[derive(Default)]
struct ChannelState {
    bytes: VecDeque<u8>,
    frames: usize,
    writer_closed: bool,
    reader_closed: bool,
}

/// One direction of a pipe.
struct Channel {
    state: Mutex<ChannelState>,
    readable: Condvar,
    writable: Condvar,
    capacity: usize,
}

impl Channel {
    fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(ChannelState::default()),
            readable: Condvar::new(),
            writable: Condvar::new(),
            capacity,
        })
    }

    fn lock(&self) -> MutexGuard<'_, ChannelState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, wire: &[u8]) -> Result<(), TransportError> {
        let mut st = self.lock();
        loop {
            if st.reader_closed || st.writer_closed {
                return Err(TransportError::ConnectionClosed);
            }
            if st.frames < self.capacity {
                break;
            }
            st = self.writable.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.bytes.extend(wire);
        st.frames += 1;
        self.readable.notify_all();
        Ok(())
    }

    fn pop_locked(&self, st: &mut ChannelState) -> Option<BitPayload> {
        if st.frames == 0 {
            return None;
        }
        let header: Vec<u8> = st.bytes.drain(..FRAME_HEADER_LEN).collect();
        let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
        let payload: Vec<u8> = st.bytes.drain(..len).collect();
        st.frames -= 1;
        self.writable.notify_all();
        Some(BitPayload::new(payload))
    }

    fn pop_timeout(&self, timeout: Option<Duration>) -> Result<Option<BitPayload>, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            if let Some(frame) = self.pop_locked(&mut st) {
                return Ok(Some(frame));
            }
            if st.writer_closed || st.reader_closed {
                return Err(TransportError::ConnectionClosed);
            }
            match deadline {
                None => return Ok(None),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    st = self
                        .readable
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
    }

    fn close_writer(&self) {
        self.lock().writer_closed = true;
        self.readable.notify_all();
        self.writable.notify_all();
    }

    fn close_reader(&self) {
        self.lock().reader_closed = true;
        self.readable.notify_all();
        self.writable.notify_all();
    }
}

/// Releases the serial-pair slot once both endpoints are gone.
struct PairSlot;

impl Drop for PairSlot {
    fn drop(&mut self) {
        OPEN_SERIAL_PAIRS.fetch_sub(1, Ordering::SeqCst);
    }
}

/// One end of an in-memory duplex pipe.
pub struct PipeEndpoint {
    name: String,
    peer: String,
    protocol: Protocol,
    inbound: Arc<Channel>,
    outbound: Arc<Channel>,
    closed: bool,
    _slot: Option<Arc<PairSlot>>,
}

impl PipeEndpoint {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Frames waiting to be read on this end.
    pub fn pending(&self) -> usize {
        self.inbound.lock().frames
    }

    /// Raw wire bytes queued toward the peer, for inspection in tests.
    pub fn outbound_wire(&self) -> Vec<u8> {
        self.outbound.lock().bytes.iter().copied().collect()
    }
}

impl std::fmt::Debug for PipeEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipeEndpoint")
            .field("name", &self.name)
            .field("peer", &self.peer)
            .field("protocol", &self.protocol)
            .finish()
    }
}

impl Connection for PipeEndpoint {
    fn protocol(&self) -> Protocol {
        self.protocol
    }

    fn peer(&self) -> &str {
        &self.peer
    }

    fn write_frame(&mut self, payload: &BitPayload) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        let wire = encode_frame(payload)?;
        self.outbound.push(&wire)
    }

    fn try_read_frame(&mut self) -> Result<Option<BitPayload>, TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        self.inbound.pop_timeout(None)
    }

    fn read_frame_timeout(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<BitPayload>, TransportError> {
        if self.closed {
            return Err(TransportError::ConnectionClosed);
        }
        self.inbound.pop_timeout(Some(timeout))
    }

    fn read_frame(&mut self) -> Result<BitPayload, TransportError> {
        loop {
            if let Some(frame) = self.read_frame_timeout(Duration::from_secs(3600))? {
                return Ok(frame);
            }
        }
    }

    fn can_write(&self) -> bool {
        let st = self.outbound.lock();
        st.frames < self.outbound.capacity || st.reader_closed
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            self.outbound.close_writer();
            self.inbound.close_reader();
        }
    }
}

impl Drop for PipeEndpoint {
    fn drop(&mut self) {
        self.close();
    }
}

/// Creates two connected endpoints. Each direction holds at most `capacity`
/// frames before the writer blocks.
pub fn pipe_pair(
    protocol: Protocol,
    name_a: &str,
    name_b: &str,
    capacity: usize,
) -> (PipeEndpoint, PipeEndpoint) {
    make_pair(protocol, name_a, name_b, capacity.max(1), None)
}

fn make_pair(
    protocol: Protocol,
    name_a: &str,
    name_b: &str,
    capacity: usize,
    slot: Option<Arc<PairSlot>>,
) -> (PipeEndpoint, PipeEndpoint) {
    let a_to_b = Channel::new(capacity);
    let b_to_a = Channel::new(capacity);
    let a = PipeEndpoint {
        name: name_a.to_string(),
        peer: name_b.to_string(),
        protocol,
        inbound: Arc::clone(&b_to_a),
        outbound: Arc::clone(&a_to_b),
        closed: false,
        _slot: slot.clone(),
    };
    let b = PipeEndpoint {
        name: name_b.to_string(),
        peer: name_a.to_string(),
        protocol,
        inbound: a_to_b,
        outbound: b_to_a,
        closed: false,
        _slot: slot,
    };
    (a, b)
}

/// Two RS232-tagged endpoints wired back to back, like a pty pair.
#[derive(Debug)]
pub struct SerialPair {
    pub a: PipeEndpoint,
    pub b: PipeEndpoint,
}

impl SerialPair {
    pub fn into_parts(self) -> (PipeEndpoint, PipeEndpoint) {
        (self.a, self.b)
    }
}

/// Opens a named virtual serial pair (`<name>A` / `<name>B` style identifiers
/// are up to the caller).
pub fn open_virtual_serial_pair(name_a: &str, name_b: &str) -> Result<SerialPair, TransportError> {
    let prev = OPEN_SERIAL_PAIRS.fetch_add(1, Ordering::SeqCst);
    if prev >= MAX_SERIAL_PAIRS {
        OPEN_SERIAL_PAIRS.fetch_sub(1, Ordering::SeqCst);
        return Err(TransportError::ResourceExhausted);
    }
    let slot = Arc::new(PairSlot);
    let (a, b) = make_pair(Protocol::Rs232, name_a, name_b, DEFAULT_PIPE_CAPACITY, Some(slot));
    Ok(SerialPair { a, b })
}
