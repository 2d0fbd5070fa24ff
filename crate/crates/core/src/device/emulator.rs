use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CommandSet, DeviceError, DeviceStats, StateProbe};
use crate::digital_thread::{read_thread, Direction, ThreadEntry};
use crate::model::{decode_message, encode_message, Message, MessageKind, Recording};
use crate::sched::{Clock, Step, Task};
use crate::transport::{Connection, TransportError};

const READ_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmulatorMode {
    /// Each recording is served at most once.
    #[default]
    Oneshot,
    /// Wraps around to the first recording when exhausted.
    Loop,
}

/// Ordered recordings an emulator serves in place of computing responses.
#[derive(Debug, Clone)]
pub struct EmulatorContext {
    recordings: Vec<Recording>,
    cursor: usize,
    mode: EmulatorMode,
}

impl EmulatorContext {
    pub fn new(recordings: Vec<Recording>, mode: EmulatorMode) -> Self {
        Self { recordings, cursor: 0, mode }
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn mode(&self) -> EmulatorMode {
        self.mode
    }

    pub fn is_exhausted(&self) -> bool {
        match self.mode {
            EmulatorMode::Oneshot => self.cursor >= self.recordings.len(),
            EmulatorMode::Loop => self.recordings.is_empty(),
        }
    }

    /// Answers an accepted command with the recording under the cursor.
    pub fn execute(&mut self, commands: &CommandSet, cmd: &Message) -> Result<Message, DeviceError> {
        if !commands.accepts(cmd) {
            return Err(DeviceError::CommandRejected(*cmd));
        }
        self.advance()
            .map(|r| r.message())
            .ok_or(DeviceError::ContextExhausted(self.recordings.len()))
    }

    fn peek(&self) -> Option<&Recording> {
        self.recordings.get(self.cursor)
    }

    fn advance(&mut self) -> Option<Recording> {
        if self.cursor >= self.recordings.len() && self.mode == EmulatorMode::Loop {
            self.cursor = 0;
        }
        let r = self.recordings.get(self.cursor).cloned()?;
        self.cursor += 1;
        Some(r)
    }
}

/// A device that replays recordings. Each command is answered with the next
/// recording; the measurements recorded after that response follow at their
/// recorded offsets, and are flushed early if the next command arrives first.
/// The response order therefore always equals the recording order.
pub struct Emulator {
    name: String,
    conn: Box<dyn Connection>,
    commands: CommandSet,
    context: EmulatorContext,
    clock: Clock,
    pending: VecDeque<(u64, Message)>,
    outbox: VecDeque<Message>,
    announced: bool,
    probe: StateProbe,
    stats: Arc<DeviceStats>,
}

impl Emulator {
    pub fn new(name: &str, conn: Box<dyn Connection>, commands: CommandSet, context: EmulatorContext, clock: Clock) -> Self {
        Self {
            name: name.to_string(),
            conn,
            commands,
            context,
            clock,
            pending: VecDeque::new(),
            outbox: VecDeque::new(),
            announced: false,
            probe: StateProbe::new(),
            stats: Arc::new(DeviceStats::default()),
        }
    }

    pub fn probe(&self) -> StateProbe {
        self.probe.clone()
    }

    pub fn stats(&self) -> Arc<DeviceStats> {
        Arc::clone(&self.stats)
    }

    pub fn context(&self) -> &EmulatorContext {
        &self.context
    }

    fn schedule_followers(&mut self, served: &Recording) {
        let now = self.clock.now_ns();
        while let Some(next) = self.context.peek() {
            if next.message().kind() != MessageKind::Measurement {
                break;
            }
            let offset = next.source_timestamp().saturating_sub(served.source_timestamp());
            let m = next.message();
            self.context.cursor += 1;
            self.pending.push_back((now + offset, m));
        }
    }

    fn serve(&mut self, cmd: Option<&Message>) -> Result<(), DeviceError> {
        // Anything still scheduled from the previous answer goes out first.
        self.outbox.extend(self.pending.drain(..).map(|(_, m)| m));
        let served = match cmd {
            Some(cmd) => {
                if !self.commands.accepts(cmd) {
                    return Err(DeviceError::CommandRejected(*cmd));
                }
                self.context.advance().ok_or(DeviceError::ContextExhausted(self.context.len()))?
            }
            None => match self.context.advance() {
                Some(r) => r,
                None => return Ok(()),
            },
        };
        self.outbox.push_back(served.message());
        self.schedule_followers(&served);
        Ok(())
    }

    fn step(&mut self) -> Result<bool, TransportError> {
        let mut progressed = false;
        if !self.announced {
            self.announced = true;
            let leading_status = self.context.peek().is_some_and(|r| r.message().kind() == MessageKind::Status);
            if leading_status {
                let _ = self.serve(None);
            }
        }
        for _ in 0..READ_BATCH {
            let Some(frame) = self.conn.try_read_frame()? else { break };
            progressed = true;
            let outcome = decode_message(&frame)
                .map_err(|_| ())
                .and_then(|cmd| self.serve(Some(&cmd)).map_err(|_| ()));
            match outcome {
                Ok(()) => DeviceStats::bump(&self.stats.commands),
                Err(()) => DeviceStats::bump(&self.stats.errors),
            }
        }
        let now = self.clock.now_ns();
        while self.pending.front().is_some_and(|(due, _)| *due <= now) {
            let (_, m) = self.pending.pop_front().expect("checked front");
            self.outbox.push_back(m);
        }
        while self.conn.can_write() {
            let Some(m) = self.outbox.pop_front() else { break };
            self.conn.write_frame(&encode_message(&m))?;
            self.probe.observe(&m);
            DeviceStats::bump(&self.stats.responses);
            progressed = true;
        }
        Ok(progressed)
    }
}

impl Task for Emulator {
    fn name(&self) -> &str {
        &self.name
    }

    fn poll(&mut self) -> Step {
        match self.step() {
            Ok(true) => Step::Progress,
            Ok(false) => Step::Idle,
            Err(_) => {
                self.conn.close();
                Step::Done
            }
        }
    }
}

/// Loads PT2DT responses from a thread or recording file. Timestamps written
/// by lockstep runs (ticks) are converted to nanoseconds.
pub fn load_recordings(path: &Path) -> Result<Vec<Recording>, DeviceError> {
    let entries = read_thread(path).map_err(|e| DeviceError::Recording(format!("{}: {e}", path.display())))?;
    let lockstep = entries.iter().any(|e| match e {
        ThreadEntry::Annotation(a) => a.text.split(' ').any(|t| t == "clock=lockstep"),
        ThreadEntry::Record(_) => false,
    });
    let unit = if lockstep { 1_000_000 } else { 1 };
    let mut out = Vec::new();
    for entry in entries {
        let ThreadEntry::Record(r) = entry else { continue };
        if r.direction != Direction::PtToDt {
            continue;
        }
        if let Some(m) = r.message() {
            let rec = Recording::new(*m, r.timestamp.saturating_mul(unit))
                .map_err(|e| DeviceError::Recording(e.to_string()))?;
            out.push(rec);
        }
    }
    Ok(out)
}
