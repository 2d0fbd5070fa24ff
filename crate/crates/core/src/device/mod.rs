//! Devices, their drivers, the recording-driven emulator and the
//! communication sessions that wire a device to its driver.

mod driver;
mod emulator;
mod sensor;
mod session;
mod transmitter;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Message, MessageKind, OperatingState, OPCODE_COMMAND};
use crate::transport::TransportError;

pub use driver::{Driver, DriverStats};
pub use emulator::{load_recordings, Emulator, EmulatorContext, EmulatorMode};
pub use sensor::{MeasurementScript, Sensor};
pub use session::{run_communication, CommunicationSession, DeviceSpec, DriverSpec, LinkSpec};
pub use transmitter::{Transmitter, TransmitterLinks, TransmitterStats};

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("command {0} is not in the accepted command set")]
    CommandRejected(Message),
    #[error("emulator context exhausted after {0} recordings")]
    ContextExhausted(usize),
    #[error("device and driver command sets differ: device {device}, driver {driver}")]
    CommandSetMismatch { device: CommandSet, driver: CommandSet },
    #[error("command set must not be empty")]
    EmptyCommandSet,
    #[error("recording file: {0}")]
    Recording(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// One accepted command: a name and the opcode it travels under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CommandSpec {
    pub name: String,
    pub opcode: u8,
}

impl CommandSpec {
    pub fn set_period() -> Self {
        Self { name: "SET_PERIOD".into(), opcode: OPCODE_COMMAND }
    }
}

/// Non-empty set of commands a device accepts. Membership is decided by opcode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CommandSpec>", into = "Vec<CommandSpec>")]
pub struct CommandSet(BTreeSet<CommandSpec>);

impl CommandSet {
    pub fn new(specs: impl IntoIterator<Item = CommandSpec>) -> Result<Self, DeviceError> {
        let set: BTreeSet<_> = specs.into_iter().collect();
        if set.is_empty() {
            return Err(DeviceError::EmptyCommandSet);
        }
        Ok(Self(set))
    }

    /// The set used by the sensor node: only SET_PERIOD.
    pub fn sensor_default() -> Self {
        Self([CommandSpec::set_period()].into_iter().collect())
    }

    pub fn accepts(&self, message: &Message) -> bool {
        message.kind() == MessageKind::Command
            && self.0.iter().any(|c| c.opcode == message.kind().opcode())
    }

    pub fn iter(&self) -> impl Iterator<Item = &CommandSpec> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for CommandSet {
    fn default() -> Self {
        Self::sensor_default()
    }
}

impl TryFrom<Vec<CommandSpec>> for CommandSet {
    type Error = DeviceError;

    fn try_from(specs: Vec<CommandSpec>) -> Result<Self, Self::Error> {
        Self::new(specs)
    }
}

impl From<CommandSet> for Vec<CommandSpec> {
    fn from(set: CommandSet) -> Self {
        set.0.into_iter().collect()
    }
}

impl fmt::Display for CommandSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> =
            self.0.iter().map(|c| format!("{}(0x{:02x})", c.name, c.opcode)).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Behavior {
    Sensor,
    Transmitter,
    Emulator,
}

const NO_STATE: u8 = u8::MAX;

/// Last status a device put on the wire; the observable physical state.
#[derive(Debug, Clone)]
pub struct StateProbe(Arc<AtomicU8>);

impl StateProbe {
    pub fn new() -> Self {
        Self(Arc::new(AtomicU8::new(NO_STATE)))
    }

    pub fn get(&self) -> Option<OperatingState> {
        OperatingState::from_code(self.0.load(Ordering::SeqCst)).ok()
    }

    pub(crate) fn observe(&self, message: &Message) {
        if let Message::Status(s) = message {
            self.0.store(s.code(), Ordering::SeqCst);
        }
    }
}

impl Default for StateProbe {
    fn default() -> Self {
        Self::new()
    }
}

/// Counters shared between a device task and whoever inspects it.
#[derive(Debug, Default)]
pub struct DeviceStats {
    pub commands: AtomicU64,
    pub responses: AtomicU64,
    pub errors: AtomicU64,
}

impl DeviceStats {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.commands.load(Ordering::SeqCst),
            self.responses.load(Ordering::SeqCst),
            self.errors.load(Ordering::SeqCst),
        )
    }

    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_sets_must_be_non_empty() {
        assert!(matches!(CommandSet::new([]), Err(DeviceError::EmptyCommandSet)));
        let set = CommandSet::sensor_default();
        assert!(set.accepts(&Message::Command(5)));
        assert!(!set.accepts(&Message::Measurement(5)));
    }

    #[test]
    fn command_set_serde_round_trip() {
        #[derive(Serialize, Deserialize)]
        struct W {
            commands: CommandSet,
        }
        let text = toml::to_string(&W { commands: CommandSet::sensor_default() }).unwrap();
        let back: W = toml::from_str(&text).unwrap();
        assert_eq!(back.commands, CommandSet::sensor_default());
        assert!(toml::from_str::<W>("commands = []").is_err());
    }

    #[test]
    fn probe_tracks_last_status() {
        let p = StateProbe::new();
        assert_eq!(p.get(), None);
        p.observe(&Message::Status(OperatingState::Active));
        p.observe(&Message::Measurement(3));
        assert_eq!(p.get(), Some(OperatingState::Active));
    }
}
