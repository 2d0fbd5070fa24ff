//! Message algebra shared by every channel in the system.
//!
//! All traffic is a [`BitPayload`]: a byte-aligned bit sequence. Typed
//! [`Message`]s map onto payloads through a fixed opcode table:
//!
//! | kind        | opcode | value bytes (big-endian) |
//! |-------------|--------|--------------------------|
//! | COMMAND     | `0x01` | 2 (`i16` period in ms)   |
//! | MEASUREMENT | `0x10` | 4 (`i32` reading)        |
//! | STATUS      | `0x20` | 1 (state code 0/1/2)     |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OPCODE_COMMAND: u8 = 0x01;
pub const OPCODE_MEASUREMENT: u8 = 0x10;
pub const OPCODE_STATUS: u8 = 0x20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("{kind} value {value} is out of range")]
    ValueOutOfRange { kind: MessageKind, value: i64 },
    #[error("unknown opcode 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("payload length {actual} does not match opcode (expected {expected} bytes)")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("invalid status code {0}")]
    InvalidStatusCode(u8),
    #[error("bit sequence of length {0} is not byte aligned")]
    Unaligned(usize),
    #[error("a recording cannot hold a command")]
    CommandRecording,
}

/// A finite, byte-aligned sequence of bits.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitPayload(Vec<u8>);

impl BitPayload {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Packs bits MSB-first. Fails unless the length is a multiple of 8.
    pub fn from_bits(bits: &[bool]) -> Result<Self, CodecError> {
        if !bits.len().is_multiple_of(8) {
            return Err(CodecError::Unaligned(bits.len()));
        }
        let bytes = bits
            .chunks(8)
            .map(|chunk| chunk.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
            .collect();
        Ok(Self(bytes))
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.0
            .iter()
            .flat_map(|byte| (0..8).rev().map(move |i| (byte >> i) & 1 == 1))
    }

    pub fn bit_len(&self) -> usize {
        self.0.len() * 8
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for BitPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitPayload({})", self.to_hex())
    }
}

impl From<Vec<u8>> for BitPayload {
    fn from(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }
}

impl From<&[u8]> for BitPayload {
    fn from(bytes: &[u8]) -> Self {
        Self(bytes.to_vec())
    }
}

/// Operating state of the sensor and of the digital model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OperatingState {
    Standby,
    Active,
    Off,
}

impl OperatingState {
    pub const ALL: [OperatingState; 3] = [Self::Standby, Self::Active, Self::Off];

    pub fn code(self) -> u8 {
        match self {
            Self::Standby => 0,
            Self::Active => 1,
            Self::Off => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        match code {
            0 => Ok(Self::Standby),
            1 => Ok(Self::Active),
            2 => Ok(Self::Off),
            other => Err(CodecError::InvalidStatusCode(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standby => "STANDBY",
            Self::Active => "ACTIVE",
            Self::Off => "OFF",
        }
    }
}

impl fmt::Display for OperatingState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatingState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "STANDBY" => Ok(Self::Standby),
            "ACTIVE" => Ok(Self::Active),
            "OFF" => Ok(Self::Off),
            other => Err(format!("unknown state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Command,
    Measurement,
    Status,
}

impl MessageKind {
    pub fn opcode(self) -> u8 {
        match self {
            Self::Command => OPCODE_COMMAND,
            Self::Measurement => OPCODE_MEASUREMENT,
            Self::Status => OPCODE_STATUS,
        }
    }

    /// Short tag used in digital-thread record lines.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Command => "CMD",
            Self::Measurement => "MEA",
            Self::Status => "STA",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "CMD" => Some(Self::Command),
            "MEA" => Some(Self::Measurement),
            "STA" => Some(Self::Status),
            _ => None,
        }
    }

    fn payload_len(self) -> usize {
        match self {
            Self::Command => 3,
            Self::Measurement => 5,
            Self::Status => 2,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Command => "COMMAND",
            Self::Measurement => "MEASUREMENT",
            Self::Status => "STATUS",
        })
    }
}

/// Typed refinement of a payload. Value ranges are enforced by the field types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Message {
    /// SET_PERIOD with the sampling period in milliseconds; the sign selects the state.
    Command(i16),
    Measurement(i32),
    Status(OperatingState),
}

impl Message {
    /// Builds a message from an untyped value, checking the kind's range.
    pub fn try_new(kind: MessageKind, value: i64) -> Result<Self, CodecError> {
        let out_of_range = || CodecError::ValueOutOfRange { kind, value };
        match kind {
            MessageKind::Command => i16::try_from(value)
                .map(Message::Command)
                .map_err(|_| out_of_range()),
            MessageKind::Measurement => i32::try_from(value)
                .map(Message::Measurement)
                .map_err(|_| out_of_range()),
            MessageKind::Status => u8::try_from(value)
                .ok()
                .and_then(|code| OperatingState::from_code(code).ok())
                .map(Message::Status)
                .ok_or_else(out_of_range),
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Command(_) => MessageKind::Command,
            Self::Measurement(_) => MessageKind::Measurement,
            Self::Status(_) => MessageKind::Status,
        }
    }

    pub fn value(&self) -> i64 {
        match *self {
            Self::Command(v) => v.into(),
            Self::Measurement(v) => v.into(),
            Self::Status(s) => s.code().into(),
        }
    }

    pub fn is_response(&self) -> bool {
        !matches!(self, Self::Command(_))
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Command(v) => write!(f, "Command({v})"),
            Self::Measurement(v) => write!(f, "Measurement({v})"),
            Self::Status(s) => write!(f, "Status({s})"),
        }
    }
}

pub fn encode_message(message: &Message) -> BitPayload {
    let mut bytes = Vec::with_capacity(message.kind().payload_len());
    bytes.push(message.kind().opcode());
    match *message {
        Message::Command(v) => bytes.extend_from_slice(&v.to_be_bytes()),
        Message::Measurement(v) => bytes.extend_from_slice(&v.to_be_bytes()),
        Message::Status(s) => bytes.push(s.code()),
    }
    BitPayload(bytes)
}

pub fn decode_message(payload: &BitPayload) -> Result<Message, CodecError> {
    let bytes = payload.as_bytes();
    let Some(&opcode) = bytes.first() else {
        return Err(CodecError::TruncatedPayload { expected: 1, actual: 0 });
    };
    let kind = match opcode {
        OPCODE_COMMAND => MessageKind::Command,
        OPCODE_MEASUREMENT => MessageKind::Measurement,
        OPCODE_STATUS => MessageKind::Status,
        other => return Err(CodecError::UnknownOpcode(other)),
    };
    if bytes.len() != kind.payload_len() {
        return Err(CodecError::TruncatedPayload {
            expected: kind.payload_len(),
            actual: bytes.len(),
        });
    }
    let body = &bytes[1..];
    Ok(match kind {
        MessageKind::Command => Message::Command(i16::from_be_bytes([body[0], body[1]])),
        MessageKind::Measurement => {
            Message::Measurement(i32::from_be_bytes([body[0], body[1], body[2], body[3]]))
        }
        MessageKind::Status => Message::Status(OperatingState::from_code(body[0])?),
    })
}

/// A stored response, served back by device emulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recording {
    message: Message,
    source_timestamp: u64,
}

impl Recording {
    pub fn new(message: Message, source_timestamp: u64) -> Result<Self, CodecError> {
        if !message.is_response() {
            return Err(CodecError::CommandRecording);
        }
        Ok(Self { message, source_timestamp })
    }

    pub fn message(&self) -> Message {
        self.message
    }

    pub fn source_timestamp(&self) -> u64 {
        self.source_timestamp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "RS232")]
    Rs232,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tcp => "TCP",
            Self::Rs232 => "RS232",
        })
    }
}
