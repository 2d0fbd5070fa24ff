//! The digital side as a separate OS process, talking to the PT over real
//! loopback TCP. The child prints `READY ...` once it listens and
//! `SUMMARY <json>` when the PT has gone away; model changes arrive on its
//! stdin as `model <STATE>` lines.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{settle, thread_header, HarnessError, LocalDt};
use crate::config::{Backing, DtConfig, DtMode};
use crate::digital_thread::{ThreadLog, ThreadRecord, ThreadRecorder};
use crate::machine::TwinState;
use crate::mapek::{assemble_shadow, assemble_twin_dt};
use crate::model::OperatingState;
use crate::sched::{Clock, ClockMode, WallRunner};
use crate::transport::{bind, Connection, TcpConnection};

const ACCEPT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct DtServeOptions {
    pub dt: DtConfig,
    pub seed: u64,
    pub backing: Backing,
    pub thread: Option<PathBuf>,
}

impl DtServeOptions {
    pub fn to_args(&self) -> Vec<String> {
        let mode = match self.dt.mode {
            DtMode::Shadow => "shadow",
            DtMode::Twin => "twin",
        };
        let backing = match self.backing {
            Backing::Real => "real",
            Backing::Emulated => "emulated",
        };
        let mut args = vec![
            "serve-dt".to_string(),
            format!("--dt={mode}"),
            format!("--backing={backing}"),
            format!("--seed={}", self.seed),
            format!("--twinning-rate-ms={}", self.dt.twinning_rate_ms),
            format!("--default-period-ms={}", self.dt.default_period_ms),
            format!("--ingest-addr={}", self.dt.ingest_addr),
            format!("--uplink-addr={}", self.dt.uplink_addr),
        ];
        if let Some(t) = &self.thread {
            args.push(format!("--thread={}", t.display()));
        }
        args
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtControl {
    Model(OperatingState),
}

impl DtControl {
    pub fn to_line(self) -> String {
        match self {
            Self::Model(s) => format!("model {s}"),
        }
    }

    pub fn parse(line: &str) -> Option<Self> {
        let (cmd, arg) = line.trim().split_once(' ')?;
        match cmd {
            "model" => arg.trim().parse().ok().map(Self::Model),
            _ => None,
        }
    }
}

/// What the digital side observed over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtSummary {
    pub final_model: TwinState,
    pub trajectory: Vec<TwinState>,
    pub pt_to_dt: u64,
    pub dt_to_pt: u64,
    pub statuses: u64,
    pub measurements: u64,
    pub sent: u64,
    pub rejected: u64,
    /// Thread records when they are at hand; omitted across processes.
    #[serde(skip)]
    pub records: Option<Vec<ThreadRecord>>,
}

/// Runs a shadow or twin on real sockets until the PT disconnects.
/// `ready` receives the line announcing the bound addresses.
pub fn serve_dt(
    opts: &DtServeOptions,
    ready: impl FnOnce(String),
    control: Receiver<DtControl>,
) -> Result<DtSummary, HarnessError> {
    let twin = opts.dt.mode == DtMode::Twin;
    let ingest_listener = bind(&opts.dt.ingest_addr)?;
    let uplink_listener = if twin { Some(bind(&opts.dt.uplink_addr)?) } else { None };
    let uplink_addr = match &uplink_listener {
        Some(l) => l.local_addr()?.to_string(),
        None => "-".into(),
    };
    ready(format!("READY ingest={} uplink={uplink_addr}", ingest_listener.local_addr()?));

    let ingest = TcpConnection::accept(&ingest_listener, ACCEPT_TIMEOUT)?;
    let clock = Clock::wall();
    let log = match &opts.thread {
        Some(p) => ThreadLog::create(p)?,
        None => ThreadLog::in_memory(),
    };
    let recorder = ThreadRecorder::new(log, clock.clone());
    recorder.annotate(thread_header(ClockMode::Wall, opts.seed, opts.backing, opts.dt.mode));
    let assembly = match &uplink_listener {
        Some(l) => {
            let uplink = TcpConnection::accept(l, ACCEPT_TIMEOUT)?;
            assemble_twin_dt(&opts.dt, Box::new(ingest), Box::new(uplink), Some(&recorder), &clock)
        }
        None => assemble_shadow(&opts.dt, Box::new(ingest), Some(&recorder), &clock),
    };
    let local = LocalDt {
        keeper: assembly.keeper.clone(),
        monitor: assembly.monitor.clone(),
        execute: assembly.execute.clone(),
        recorder,
    };
    let mut runner = WallRunner::new();
    for t in assembly.tasks {
        runner.spawn(t);
    }
    while !local.monitor.closed() {
        match control.recv_timeout(Duration::from_millis(2)) {
            Ok(DtControl::Model(s)) => local.keeper.inject(s),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => std::thread::sleep(Duration::from_millis(2)),
        }
    }
    settle(&local);
    runner.join();
    let mut summary = super::local_summary(&local);
    summary.records = None;
    Ok(summary)
}

/// Harness-side handle on a `serve-dt` child.
pub(super) struct RemoteDt {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
}

impl RemoteDt {
    /// Starts the child and connects the PT-side ends of ingest and uplink.
    #[allow(clippy::type_complexity)]
    pub(super) fn spawn(
        exe: &Path,
        opts: &DtServeOptions,
    ) -> Result<(Self, Box<dyn Connection>, Option<Box<dyn Connection>>), HarnessError> {
        let mut child = Command::new(exe)
            .args(opts.to_args())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut remote = Self { child, stdin, stdout };
        let line = remote.read_line_starting("READY")?;
        let ingest_addr = field(&line, "ingest").ok_or_else(|| HarnessError::Remote(format!("bad ready line `{line}`")))?;
        let ingest: Box<dyn Connection> = Box::new(TcpConnection::connect(ingest_addr)?);
        let uplink: Option<Box<dyn Connection>> = match field(&line, "uplink") {
            Some("-") | None => None,
            Some(addr) => Some(Box::new(TcpConnection::connect(addr)?)),
        };
        Ok((remote, ingest, uplink))
    }

    fn read_line_starting(&mut self, prefix: &str) -> Result<String, HarnessError> {
        let deadline = Instant::now() + ACCEPT_TIMEOUT;
        let mut line = String::new();
        while Instant::now() < deadline {
            line.clear();
            if self.stdout.read_line(&mut line)? == 0 {
                let status = self.child.wait()?;
                return Err(HarnessError::Remote(format!("exited ({status}) before `{prefix}`")));
            }
            if line.starts_with(prefix) {
                return Ok(line.trim_end().to_string());
            }
        }
        Err(HarnessError::Remote(format!("no `{prefix}` line")))
    }

    pub(super) fn send(&mut self, c: DtControl) -> Result<(), HarnessError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| HarnessError::Remote("stdin closed".into()))?;
        writeln!(stdin, "{}", c.to_line())?;
        stdin.flush()?;
        Ok(())
    }

    /// Waits for the child's summary. Call after the PT side has shut down.
    pub(super) fn finish(mut self) -> Result<DtSummary, HarnessError> {
        drop(self.stdin.take());
        let line = self.read_line_starting("SUMMARY")?;
        let json = line.trim_start_matches("SUMMARY").trim();
        let summary = serde_json::from_str(json).map_err(|e| HarnessError::Remote(format!("bad summary: {e}")))?;
        let status = self.child.wait()?;
        if !status.success() {
            return Err(HarnessError::Remote(format!("exited with {status}")));
        }
        Ok(summary)
    }
}

impl Drop for RemoteDt {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
