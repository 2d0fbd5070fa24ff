use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::CommandSet;
use crate::bus::{BusError, Consumer, Producer};
use crate::model::{decode_message, encode_message, BitPayload, Message};
use crate::sched::{Step, Task};
use crate::transport::{Connection, TransportError};

const BATCH: usize = 64;

#[derive(Debug, Default)]
pub struct DriverStats {
    pub sent: AtomicU64,
    pub received: AtomicU64,
    pub errors: AtomicU64,
    transcript: Mutex<Vec<BitPayload>>,
}

impl DriverStats {
    /// Every inbound frame in arrival order, decodable or not.
    pub fn transcript(&self) -> Vec<BitPayload> {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn errors(&self) -> u64 {
        self.errors.load(Ordering::SeqCst)
    }
}

/// Relays between a device connection and the bus. Items consumed from the
/// bus are written to the device; frames read from the device are emitted.
/// Never originates or alters a message.
pub struct Driver {
    name: String,
    conn: Box<dyn Connection>,
    commands: CommandSet,
    emitter: Producer<Message>,
    consumer: Consumer<Message>,
    stats: Arc<DriverStats>,
}

impl Driver {
    pub fn new(
        name: &str,
        conn: Box<dyn Connection>,
        commands: CommandSet,
        emitter: Producer<Message>,
        consumer: Consumer<Message>,
    ) -> Self {
        Self {
            name: name.to_string(),
            conn,
            commands,
            emitter,
            consumer,
            stats: Arc::new(DriverStats::default()),
        }
    }

    pub fn commands(&self) -> &CommandSet {
        &self.commands
    }

    pub fn stats(&self) -> Arc<DriverStats> {
        Arc::clone(&self.stats)
    }

    /// Consume from the bus, write to the device.
    pub fn send_step(&mut self) -> Result<bool, DriverStop> {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.conn.can_write() {
                break;
            }
            let Some(item) = self.consumer.try_consume()? else { break };
            self.conn.write_frame(&encode_message(&item))?;
            self.stats.sent.fetch_add(1, Ordering::SeqCst);
            moved = true;
        }
        Ok(moved)
    }

    /// Read from the device, emit on the bus.
    pub fn receive_step(&mut self) -> Result<bool, DriverStop> {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.emitter.can_emit() {
                break;
            }
            let Some(frame) = self.conn.try_read_frame()? else { break };
            moved = true;
            self.stats.transcript.lock().unwrap_or_else(|e| e.into_inner()).push(frame.clone());
            match decode_message(&frame) {
                Ok(m) => {
                    self.emitter.emit(m);
                    self.stats.received.fetch_add(1, Ordering::SeqCst);
                }
                Err(_) => {
                    self.stats.errors.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
        Ok(moved)
    }
}

/// Why a driver loop ended.
#[derive(Debug)]
pub enum DriverStop {
    Transport(TransportError),
    Bus(BusError),
}

impl From<TransportError> for DriverStop {
    fn from(e: TransportError) -> Self {
        Self::Transport(e)
    }
}

impl From<BusError> for DriverStop {
    fn from(e: BusError) -> Self {
        Self::Bus(e)
    }
}

impl Task for Driver {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self) -> Step {
        let result = self.receive_step().and_then(|a| Ok(a | self.send_step()?));
        match result {
            Ok(true) => Step::Progress,
            Ok(false) => Step::Idle,
            Err(_) => {
                self.conn.close();
                Step::Done
            }
        }
    }
}
