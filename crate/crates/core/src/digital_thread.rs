//! The digital thread: an append-only, line-oriented record of every message
//! exchanged between the physical twin and its digital counterpart.
//!
//! Record lines are
//!
//! ```text
//! seq=<u64> ts=<u64> dir=<PT2DT|DT2PT> kind=<CMD|MEA|STA> hex=<payload>
//! ```
//!
//! separated by single spaces and terminated by `\n`. Frames that fail to
//! decode are kept as `kind=RAW`. Lines starting with `#` are annotations
//! (stage decisions, gate rejections) and carry no sequence number.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{decode_message, encode_message, BitPayload, Message, MessageKind};
use crate::sched::Clock;
use crate::transport::{Connection, TransportError};

#[derive(Debug, Error)]
pub enum ThreadError {
    #[error("{direction} record cannot carry a {kind} message")]
    DirectionKindMismatch { direction: Direction, kind: MessageKind },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("corrupt record at seq {seq}: {reason}")]
    CorruptRecord { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Physical twin to digital side: measurements and statuses.
    PtToDt,
    /// Digital side to physical twin: commands.
    DtToPt,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Self::PtToDt => "PT2DT",
            Self::DtToPt => "DT2PT",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "PT2DT" => Some(Self::PtToDt),
            "DT2PT" => Some(Self::DtToPt),
            _ => None,
        }
    }

    pub fn admits(self, kind: MessageKind) -> bool {
        match self {
            Self::PtToDt => kind != MessageKind::Command,
            Self::DtToPt => kind == MessageKind::Command,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordBody {
    Message(Message),
    /// A frame that crossed the channel but did not decode.
    Raw(BitPayload),
}

impl RecordBody {
    pub fn from_frame(frame: &BitPayload) -> Self {
        match decode_message(frame) {
            Ok(m) => Self::Message(m),
            Err(_) => Self::Raw(frame.clone()),
        }
    }

    pub fn message(&self) -> Option<&Message> {
        match self {
            Self::Message(m) => Some(m),
            Self::Raw(_) => None,
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self {
            Self::Message(m) => m.kind().tag(),
            Self::Raw(_) => "RAW",
        }
    }

    fn payload(&self) -> BitPayload {
        match self {
            Self::Message(m) => encode_message(m),
            Self::Raw(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadRecord {
    pub seq: u64,
    /// Nanoseconds since session start, or the logical tick in lockstep runs.
    pub timestamp: u64,
    pub direction: Direction,
    pub body: RecordBody,
}

impl ThreadRecord {
    pub fn message(&self) -> Option<&Message> {
        self.body.message()
    }

    pub fn to_line(&self) -> String {
        format!(
            "seq={} ts={} dir={} kind={} hex={}\n",
            self.seq,
            self.timestamp,
            self.direction.tag(),
            self.body.kind_tag(),
            self.body.payload().to_hex()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub timestamp: u64,
    pub text: String,
}

impl Annotation {
    pub fn to_line(&self) -> String {
        format!("# ts={} {}\n", self.timestamp, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThreadEntry {
    Record(ThreadRecord),
    Annotation(Annotation),
}

/// The append-only store behind a thread. Optionally mirrored to a file.
pub struct ThreadLog {
    sink: Option<BufWriter<File>>,
    entries: Vec<ThreadEntry>,
    last_seq: u64,
    pt_to_dt: u64,
    dt_to_pt: u64,
}

impl ThreadLog {
    pub fn in_memory() -> Self {
        Self { sink: None, entries: Vec::new(), last_seq: 0, pt_to_dt: 0, dt_to_pt: 0 }
    }

    /// Creates (truncating) the file at `path`.
    pub fn create(path: &Path) -> Result<Self, ThreadError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { sink: Some(BufWriter::new(file)), ..Self::in_memory() })
    }

    /// Appends a record and returns its sequence number (previous + 1).
    pub fn append_record(
        &mut self,
        timestamp: u64,
        direction: Direction,
        body: RecordBody,
    ) -> Result<u64, ThreadError> {
        if let RecordBody::Message(m) = &body {
            if !direction.admits(m.kind()) {
                return Err(ThreadError::DirectionKindMismatch { direction, kind: m.kind() });
            }
        }
        let record = ThreadRecord { seq: self.last_seq + 1, timestamp, direction, body };
        if let Some(sink) = self.sink.as_mut() {
            sink.write_all(record.to_line().as_bytes())?;
            sink.flush()?;
        }
        self.last_seq = record.seq;
        match direction {
            Direction::PtToDt => self.pt_to_dt += 1,
            Direction::DtToPt => self.dt_to_pt += 1,
        }
        self.entries.push(ThreadEntry::Record(record));
        Ok(self.last_seq)
    }

    pub fn annotate(&mut self, timestamp: u64, text: impl Into<String>) -> Result<(), ThreadError> {
        let note = Annotation { timestamp, text: sanitize(&text.into()) };
        if let Some(sink) = self.sink.as_mut() {
            sink.write_all(note.to_line().as_bytes())?;
            sink.flush()?;
        }
        self.entries.push(ThreadEntry::Annotation(note));
        Ok(())
    }

    pub fn entries(&self) -> &[ThreadEntry] {
        &self.entries
    }

    pub fn records(&self) -> impl Iterator<Item = &ThreadRecord> {
        self.entries.iter().filter_map(|e| match e {
            ThreadEntry::Record(r) => Some(r),
            ThreadEntry::Annotation(_) => None,
        })
    }

    pub fn count(&self, direction: Direction) -> u64 {
        match direction {
            Direction::PtToDt => self.pt_to_dt,
            Direction::DtToPt => self.dt_to_pt,
        }
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn flush(&mut self) -> Result<(), ThreadError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
            sink.get_ref().sync_data()?;
        }
        Ok(())
    }
}

fn sanitize(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

/// Shared handle through which every tap and stage writes to one log.
#[derive(Clone)]
pub struct ThreadRecorder {
    log: Arc<Mutex<ThreadLog>>,
    clock: Clock,
}

impl ThreadRecorder {
    pub fn new(log: ThreadLog, clock: Clock) -> Self {
        Self { log: Arc::new(Mutex::new(log)), clock }
    }

    pub fn lock(&self) -> MutexGuard<'_, ThreadLog> {
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Records a frame observed on a channel; undecodable frames are kept raw.
    /// A decoded message travelling against its direction is kept raw too.
    pub fn record_frame(&self, direction: Direction, frame: &BitPayload) -> Result<u64, ThreadError> {
        let mut body = RecordBody::from_frame(frame);
        if let RecordBody::Message(m) = &body {
            if !direction.admits(m.kind()) {
                body = RecordBody::Raw(frame.clone());
            }
        }
        let ts = self.clock.stamp();
        self.lock().append_record(ts, direction, body)
    }

    pub fn record_message(&self, direction: Direction, message: Message) -> Result<u64, ThreadError> {
        let ts = self.clock.stamp();
        self.lock().append_record(ts, direction, RecordBody::Message(message))
    }

    pub fn annotate(&self, text: impl Into<String>) {
        let ts = self.clock.stamp();
        // Annotations are diagnostic; a failing sink surfaces on the next record.
        let _ = self.lock().annotate(ts, text);
    }

    pub fn count(&self, direction: Direction) -> u64 {
        self.lock().count(direction)
    }

    pub fn records(&self) -> Vec<ThreadRecord> {
        self.lock().records().cloned().collect()
    }

    pub fn entries(&self) -> Vec<ThreadEntry> {
        self.lock().entries().to_vec()
    }

    pub fn flush(&self) -> Result<(), ThreadError> {
        self.lock().flush()
    }
}

/// Wraps a connection and records every frame that crosses it. Delivery is
/// untouched: the same bytes go through in the same order.
pub struct TappedConnection<C> {
    inner: C,
    direction: Direction,
    recorder: ThreadRecorder,
    errors: u64,
}

impl<C: Connection> TappedConnection<C> {
    pub fn new(inner: C, direction: Direction, recorder: ThreadRecorder) -> Self {
        Self { inner, direction, recorder, errors: 0 }
    }

    pub fn storage_errors(&self) -> u64 {
        self.errors
    }

    pub fn into_inner(self) -> C {
        self.inner
    }

    fn observe(&mut self, frame: &BitPayload) {
        if self.recorder.record_frame(self.direction, frame).is_err() {
            self.errors += 1;
        }
    }
}

impl<C: Connection> Connection for TappedConnection<C> {
    fn protocol(&self) -> crate::model::Protocol {
        self.inner.protocol()
    }

    fn peer(&self) -> &str {
        self.inner.peer()
    }

    fn write_frame(&mut self, payload: &BitPayload) -> Result<(), TransportError> {
        self.inner.write_frame(payload)?;
        self.observe(payload);
        Ok(())
    }

    fn try_read_frame(&mut self) -> Result<Option<BitPayload>, TransportError> {
        let frame = self.inner.try_read_frame()?;
        if let Some(f) = &frame {
            self.observe(f);
        }
        Ok(frame)
    }

    fn read_frame_timeout(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<BitPayload>, TransportError> {
        let frame = self.inner.read_frame_timeout(timeout)?;
        if let Some(f) = &frame {
            self.observe(f);
        }
        Ok(frame)
    }

    fn can_write(&self) -> bool {
        self.inner.can_write()
    }

    fn close(&mut self) {
        self.inner.close()
    }
}

/// Starts observing `conn` for `direction`.
pub fn tap_channel<C: Connection>(
    conn: C,
    direction: Direction,
    recorder: &ThreadRecorder,
) -> TappedConnection<C> {
    TappedConnection::new(conn, direction, recorder.clone())
}

fn parse_field<'a>(token: Option<&'a str>, key: &str) -> Result<&'a str, String> {
    let token = token.ok_or_else(|| format!("missing `{key}` field"))?;
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| format!("expected `{key}=`, found `{token}`"))
}

fn parse_record(line: &str) -> Result<ThreadRecord, (Option<u64>, String)> {
    let mut fields = line.split(' ');
    let seq = parse_field(fields.next(), "seq")
        .and_then(|s| s.parse::<u64>().map_err(|e| format!("bad seq: {e}")))
        .map_err(|e| (None, e))?;
    let err = |reason: String| (Some(seq), reason);
    let timestamp = parse_field(fields.next(), "ts")
        .and_then(|s| s.parse::<u64>().map_err(|e| format!("bad ts: {e}")))
        .map_err(err)?;
    let direction = parse_field(fields.next(), "dir")
        .and_then(|s| Direction::from_tag(s).ok_or_else(|| format!("bad dir `{s}`")))
        .map_err(err)?;
    let kind = parse_field(fields.next(), "kind").map_err(err)?;
    let payload = parse_field(fields.next(), "hex")
        .and_then(|s| {
            if s.chars().any(|c| c.is_ascii_uppercase()) {
                return Err("hex must be lowercase".to_string());
            }
            hex::decode(s).map_err(|e| format!("bad hex: {e}"))
        })
        .map(BitPayload::new)
        .map_err(err)?;
    if let Some(extra) = fields.next() {
        return Err(err(format!("unexpected field `{extra}`")));
    }
    let body = if kind == "RAW" {
        RecordBody::Raw(payload)
    } else {
        let expected = MessageKind::from_tag(kind).ok_or_else(|| err(format!("bad kind `{kind}`")))?;
        let message = decode_message(&payload).map_err(|e| err(e.to_string()))?;
        if message.kind() != expected {
            return Err(err(format!("kind {kind} does not match payload {message}")));
        }
        if !direction.admits(message.kind()) {
            return Err(err(format!("{direction} cannot carry {}", message.kind())));
        }
        RecordBody::Message(message)
    };
    Ok(ThreadRecord { seq, timestamp, direction, body })
}

fn parse_annotation(line: &str) -> Option<Annotation> {
    let rest = line.strip_prefix("# ")?;
    let (ts, text) = rest.split_once(' ').unwrap_or((rest, ""));
    let timestamp = ts.strip_prefix("ts=")?.parse().ok()?;
    Some(Annotation { timestamp, text: text.to_string() })
}

/// Parses a complete thread file body.
pub fn parse_thread(text: &str) -> Result<Vec<ThreadEntry>, ThreadError> {
    let mut entries = Vec::new();
    let mut last_seq = 0u64;
    let mut rest = text;
    while !rest.is_empty() {
        let (line, terminated) = match rest.find('\n') {
            Some(i) => (&rest[..i], true),
            None => (rest, false),
        };
        rest = if terminated { &rest[line.len() + 1..] } else { "" };
        if line.starts_with('#') {
            let note = parse_annotation(line).unwrap_or(Annotation { timestamp: 0, text: line.into() });
            entries.push(ThreadEntry::Annotation(note));
            continue;
        }
        let record = parse_record(line).map_err(|(seq, reason)| ThreadError::CorruptRecord {
            seq: seq.unwrap_or(last_seq + 1),
            reason,
        })?;
        if !terminated {
            return Err(ThreadError::CorruptRecord {
                seq: record.seq,
                reason: "record is not newline-terminated".into(),
            });
        }
        if record.seq <= last_seq {
            return Err(ThreadError::CorruptRecord {
                seq: record.seq,
                reason: format!("seq does not increase (previous {last_seq})"),
            });
        }
        last_seq = record.seq;
        entries.push(ThreadEntry::Record(record));
    }
    Ok(entries)
}

pub fn read_thread(path: &Path) -> Result<Vec<ThreadEntry>, ThreadError> {
    parse_thread(&std::fs::read_to_string(path)?)
}

pub fn read_records(path: &Path) -> Result<Vec<ThreadRecord>, ThreadError> {
    Ok(read_thread(path)?
        .into_iter()
        .filter_map(|e| match e {
            ThreadEntry::Record(r) => Some(r),
            ThreadEntry::Annotation(_) => None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Sleep for the recorded gaps (timestamps are nanoseconds).
    WallClock,
    /// Yield records back to back.
    Collapsed,
}

/// Iterates records in sequence order, optionally honoring the recorded timing.
pub struct ThreadReplay {
    records: std::vec::IntoIter<ThreadRecord>,
    pacing: Pacing,
    last_ts: Option<u64>,
}

impl Iterator for ThreadReplay {
    type Item = ThreadRecord;

    fn next(&mut self) -> Option<ThreadRecord> {
        let record = self.records.next()?;
        if self.pacing == Pacing::WallClock {
            if let Some(prev) = self.last_ts {
                let gap = record.timestamp.saturating_sub(prev);
                std::thread::sleep(Duration::from_nanos(gap));
            }
        }
        self.last_ts = Some(record.timestamp);
        Some(record)
    }
}

pub fn replay_thread(path: &Path, pacing: Pacing) -> Result<ThreadReplay, ThreadError> {
    let mut records = read_records(path)?;
    records.sort_by_key(|r| r.seq);
    Ok(ThreadReplay { records: records.into_iter(), pacing, last_ts: None })
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Per-process knowledge: every message seen plus derived notes. Never shrinks.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeStore {
    entries: Vec<Knowledge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Knowledge {
    Observed(Direction, Message),
    Note(String),
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ThreadRecord>) -> Self {
        let mut store = Self::new();
        for r in records {
            if let Some(m) = r.message() {
                store.observe(r.direction, *m);
            }
        }
        store
    }

    pub fn observe(&mut self, direction: Direction, message: Message) {
        self.entries.push(Knowledge::Observed(direction, message));
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.entries.push(Knowledge::Note(text.into()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Knowledge] {
        &self.entries
    }
}
