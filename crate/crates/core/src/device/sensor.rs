use std::collections::VecDeque;
use std::sync::Arc;

use super::{CommandSet, DeviceError, DeviceStats, StateProbe};
use crate::machine::StateMachineDef;
use crate::model::{decode_message, encode_message, Message, OperatingState};
use crate::sched::{Clock, Step, Task};
use crate::transport::{Connection, TransportError};

const READ_BATCH: usize = 64;

/// Scripted sensor readings: `(time_ms, value)` pairs, sample-and-hold.
#[derive(Debug, Clone, Default)]
pub struct MeasurementScript(Arc<Vec<(u64, i32)>>);

impl MeasurementScript {
    pub fn new(mut entries: Vec<(u64, i32)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self(Arc::new(entries))
    }

    /// Reading at `t_ms`: the last scripted value at or before `t_ms`, else 0.
    pub fn value_at(&self, t_ms: u64) -> i32 {
        let idx = self.0.partition_point(|e| e.0 <= t_ms);
        if idx == 0 {
            0
        } else {
            self.0[idx - 1].1
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Software stand-in for the real sensor. Applies the sign rule to every
/// SET_PERIOD command, answers with its new status and, while active, samples
/// the measurement script once per period.
pub struct Sensor {
    name: String,
    conn: Box<dyn Connection>,
    commands: CommandSet,
    machine: StateMachineDef,
    state: OperatingState,
    period: i16,
    script: MeasurementScript,
    clock: Clock,
    next_sample_ms: Option<u64>,
    announced: bool,
    outbox: VecDeque<Message>,
    probe: StateProbe,
    stats: Arc<DeviceStats>,
}

impl Sensor {
    pub fn new(
        name: &str,
        conn: Box<dyn Connection>,
        commands: CommandSet,
        script: MeasurementScript,
        clock: Clock,
    ) -> Self {
        let machine = StateMachineDef::builtin();
        Self {
            name: name.to_string(),
            conn,
            commands,
            state: machine.initial(),
            machine,
            period: 0,
            script,
            clock,
            next_sample_ms: None,
            announced: false,
            outbox: VecDeque::new(),
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

    pub fn state(&self) -> OperatingState {
        self.state
    }

    /// Executes one command and returns the status response.
    pub fn execute(&mut self, cmd: &Message) -> Result<Message, DeviceError> {
        let Message::Command(period) = *cmd else {
            return Err(DeviceError::CommandRejected(*cmd));
        };
        if !self.commands.accepts(cmd) {
            return Err(DeviceError::CommandRejected(*cmd));
        }
        self.state = self.machine.transition(self.state, period);
        self.period = period;
        self.next_sample_ms = (self.state == OperatingState::Active && period > 0)
            .then(|| self.clock.now_ms() + period as u64);
        Ok(Message::Status(self.state))
    }

    fn handle_frame(&mut self, frame: &crate::model::BitPayload) {
        let response = decode_message(frame)
            .map_err(|_| ())
            .and_then(|m| self.execute(&m).map_err(|_| ()));
        match response {
            Ok(status) => {
                DeviceStats::bump(&self.stats.commands);
                self.outbox.push_back(status);
            }
            Err(()) => DeviceStats::bump(&self.stats.errors),
        }
    }

    fn sample(&mut self) {
        let Some(due) = self.next_sample_ms else { return };
        let now = self.clock.now_ms();
        if now < due {
            return;
        }
        self.outbox.push_back(Message::Measurement(self.script.value_at(due)));
        let mut next = due + self.period as u64;
        if next <= now {
            // Fell behind (wall clock only): skip missed samples.
            next = now + self.period as u64;
        }
        self.next_sample_ms = Some(next);
    }

    fn flush(&mut self) -> Result<bool, TransportError> {
        let mut wrote = false;
        while self.conn.can_write() {
            let Some(m) = self.outbox.pop_front() else { break };
            self.conn.write_frame(&encode_message(&m))?;
            self.probe.observe(&m);
            DeviceStats::bump(&self.stats.responses);
            wrote = true;
        }
        Ok(wrote)
    }

    fn step(&mut self) -> Result<bool, TransportError> {
        let mut progressed = false;
        if !self.announced {
            // Power-on announcement of the initial state.
            self.announced = true;
            self.outbox.push_back(Message::Status(self.state));
        }
        for _ in 0..READ_BATCH {
            match self.conn.try_read_frame()? {
                Some(frame) => {
                    self.handle_frame(&frame);
                    progressed = true;
                }
                None => break,
            }
        }
        self.sample();
        progressed |= self.flush()?;
        Ok(progressed)
    }
}

impl Task for Sensor {
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
