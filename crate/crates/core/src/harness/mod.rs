//! Scenario runner: wires a physical twin or prototype to a shadow or twin,
//! drives the scenario schedule, taps both channels into a thread file and
//! checks the run's invariants.

mod ci;
mod remote;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ci::{ci_test, CaseFile, CaseOutcome, CiError, Expectations, SuiteReport};
pub use remote::{serve_dt, DtControl, DtServeOptions, DtSummary};

use crate::config::{Backing, ConfigError, DtMode, Isolation, Scenario, TwinConfig};
use crate::control::{assemble_twin, AssemblyError, ControlState, ExternalLinks};
use crate::device::{DeviceError, DriverStats, MeasurementScript, StateProbe, TransmitterStats};
use crate::digital_thread::{
    read_thread, sha256_file, Direction, RecordBody, ThreadEntry, ThreadError, ThreadLog, ThreadRecord,
    ThreadRecorder,
};
use crate::machine::TwinState;
use crate::mapek::{
    assemble_shadow, assemble_twin_dt, replay_into_shadow, DtAssembly, ExecuteStats, ModelKeeper, MonitorStats,
};
use crate::model::{encode_message, Message, OperatingState};
use crate::sched::{Clock, ClockMode, LockstepScheduler, SchedError, Task, WallRunner};
use crate::transport::{open_tcp_link, Connection, TransportError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported run: {0}")]
    Unsupported(String),
    #[error("digital twin process: {0}")]
    Remote(String),
}

impl HarnessError {
    /// Errors caused by the inputs rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Unsupported(_) | Self::Assembly(AssemblyError::RecordingMissing(_))
        )
    }
}

/// What to assemble and how to schedule it.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub backing: Backing,
    pub dt_mode: DtMode,
    pub clock: ClockMode,
    pub seed: u64,
    pub isolation: Isolation,
    /// Thread file to write; the thread is kept in memory when absent.
    pub thread_path: Option<PathBuf>,
    /// Executable that provides `serve-dt`, needed for process isolation.
    pub dt_exe: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(cfg: &TwinConfig, scenario: &Scenario) -> Self {
        Self {
            backing: cfg.pt.backing,
            dt_mode: cfg.dt.mode,
            clock: ClockMode::Lockstep,
            seed: scenario.seed,
            isolation: cfg.harness.isolation,
            thread_path: None,
            dt_exe: None,
        }
    }

    /// First line of every thread file.
    pub fn header(&self) -> String {
        thread_header(self.clock, self.seed, self.backing, self.dt_mode)
    }
}

pub(crate) fn thread_header(clock: ClockMode, seed: u64, backing: Backing, dt: DtMode) -> String {
    let clock = match clock {
        ClockMode::Wall => "wall",
        ClockMode::Lockstep => "lockstep",
    };
    let backing = match backing {
        Backing::Real => "real",
        Backing::Emulated => "emulated",
    };
    let dt = match dt {
        DtMode::Shadow => "shadow",
        DtMode::Twin => "twin",
    };
    format!("clock={clock} seed={seed} backing={backing} dt={dt}")
}

/// Machine-readable outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub backing: Backing,
    pub dt_mode: DtMode,
    pub clock: ClockMode,
    pub seed: u64,
    pub final_model: TwinState,
    pub final_pt: Option<OperatingState>,
    pub trajectory: Vec<TwinState>,
    pub pt_to_dt_records: u64,
    pub dt_to_pt_records: u64,
    pub ingest_frames: u64,
    pub uplink_frames: u64,
    pub operator_commands: u64,
    pub gate_rejections: u64,
    pub control_log_entries: usize,
    /// Every frame the sensor driver received, hex encoded.
    pub sensor_transcript: Vec<String>,
    pub thread_path: Option<PathBuf>,
    pub thread_sha256: Option<String>,
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[allow(clippy::large_enum_variant)]
enum Exec {
    Lockstep { sched: LockstepScheduler, next_tick: u64 },
    Wall { pt: WallRunner, dt: Option<WallRunner>, start: Instant },
}

struct LocalDt {
    keeper: ModelKeeper,
    monitor: Arc<MonitorStats>,
    execute: Option<Arc<ExecuteStats>>,
    recorder: ThreadRecorder,
}

enum DtSide {
    Local(LocalDt),
    Remote(remote::RemoteDt),
}

struct PtHandles {
    probe: StateProbe,
    transmitter: Arc<TransmitterStats>,
    sensor_driver: Arc<DriverStats>,
    control: Arc<std::sync::Mutex<ControlState>>,
}

/// A running PT plus DT pair that can be stepped, injected into and finished.
pub struct Session {
    spec: RunSpec,
    exec: Exec,
    operator: Box<dyn Connection>,
    dt: DtSide,
    pt: PtHandles,
    assembly_flush: Option<Box<dyn FnOnce() -> Result<(), ThreadError> + Send>>,
}

impl Session {
    pub fn start(cfg: &TwinConfig, spec: RunSpec, script: MeasurementScript) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mode = spec.clock;
        if spec.isolation == Isolation::Processes && mode == ClockMode::Lockstep {
            return Err(HarnessError::Unsupported("process isolation needs the wall clock".into()));
        }
        let clock = match mode {
            ClockMode::Wall => Clock::wall(),
            ClockMode::Lockstep => Clock::logical(),
        };
        let twin = spec.dt_mode == DtMode::Twin;
        let (operator, operator_pt) = open_tcp_link(mode, "127.0.0.1:0", "operator", "transmitter.operator")?;

        let (dt, dt_tasks, ingest_pt, uplink_pt): (DtSide, Vec<Box<dyn Task>>, _, _) = match spec.isolation {
            Isolation::InProcess => {
                let (dt_ingest, pt_ingest) =
                    open_tcp_link(mode, &cfg.dt.ingest_addr, "dt.ingest", "transmitter.ingest")?;
                let log = match &spec.thread_path {
                    Some(p) => ThreadLog::create(p)?,
                    None => ThreadLog::in_memory(),
                };
                let recorder = ThreadRecorder::new(log, clock.clone());
                recorder.annotate(spec.header());
                let (assembly, pt_uplink): (DtAssembly, Option<Box<dyn Connection>>) = if twin {
                    let (dt_uplink, pt_uplink) =
                        open_tcp_link(mode, &cfg.dt.uplink_addr, "dt.uplink", "transmitter.uplink")?;
                    (assemble_twin_dt(&cfg.dt, dt_ingest, dt_uplink, Some(&recorder), &clock), Some(pt_uplink))
                } else {
                    (assemble_shadow(&cfg.dt, dt_ingest, Some(&recorder), &clock), None)
                };
                let local = LocalDt {
                    keeper: assembly.keeper.clone(),
                    monitor: assembly.monitor.clone(),
                    execute: assembly.execute.clone(),
                    recorder,
                };
                (DtSide::Local(local), assembly.tasks, pt_ingest, pt_uplink)
            }
            Isolation::Processes => {
                let exe = spec
                    .dt_exe
                    .clone()
                    .ok_or_else(|| HarnessError::Unsupported("process isolation needs the twinloop executable".into()))?;
                let opts = DtServeOptions {
                    dt: cfg.dt.clone(),
                    seed: spec.seed,
                    backing: spec.backing,
                    thread: spec.thread_path.clone(),
                };
                let (remote, ingest, uplink) = remote::RemoteDt::spawn(&exe, &opts)?;
                (DtSide::Remote(remote), Vec::new(), ingest, uplink)
            }
        };

        let links = ExternalLinks { ingest: Some(ingest_pt), uplink: uplink_pt, operator: Some(operator_pt) };
        let mut assembly = assemble_twin(cfg, spec.backing, &clock, script, links)?;
        let pt_tasks = std::mem::take(&mut assembly.tasks);
        let pt = PtHandles {
            probe: assembly.sensor_probe.clone(),
            transmitter: assembly.transmitter.clone(),
            sensor_driver: assembly.sensor_driver.clone(),
            control: assembly.control.clone(),
        };
        let exec = match mode {
            ClockMode::Lockstep => {
                let mut sched = LockstepScheduler::new(clock, spec.seed);
                for t in pt_tasks.into_iter().chain(dt_tasks) {
                    sched.spawn(t);
                }
                Exec::Lockstep { sched, next_tick: 0 }
            }
            ClockMode::Wall => {
                let mut pt_runner = WallRunner::new();
                for t in pt_tasks {
                    pt_runner.spawn(t);
                }
                let dt_runner = (!dt_tasks.is_empty()).then(|| {
                    let mut r = WallRunner::new();
                    for t in dt_tasks {
                        r.spawn(t);
                    }
                    r
                });
                Exec::Wall { pt: pt_runner, dt: dt_runner, start: Instant::now() }
            }
        };
        Ok(Self {
            spec,
            exec,
            operator,
            dt,
            pt,
            assembly_flush: Some(Box::new(move || assembly.flush_data_log())),
        })
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    /// Sends a command to the PT through the operator link.
    pub fn operator_command(&mut self, period: i16) -> Result<(), HarnessError> {
        self.operator.write_frame(&encode_message(&Message::Command(period)))?;
        Ok(())
    }

    /// Changes the digital model directly.
    pub fn inject_model(&mut self, state: OperatingState) -> Result<(), HarnessError> {
        match &mut self.dt {
            DtSide::Local(dt) => dt.keeper.inject(state),
            DtSide::Remote(r) => r.send(DtControl::Model(state))?,
        }
        Ok(())
    }

    pub fn pt_state(&self) -> Option<OperatingState> {
        self.pt.probe.get()
    }

    /// Current digital model; only known for in-process digital sides.
    pub fn model(&self) -> Option<TwinState> {
        match &self.dt {
            DtSide::Local(dt) => Some(dt.keeper.snapshot()),
            DtSide::Remote(_) => None,
        }
    }

    /// Last PT state the digital side observed; only known in process.
    pub fn observed_pt(&self) -> Option<OperatingState> {
        match &self.dt {
            DtSide::Local(dt) => dt.keeper.last_pt_state(),
            DtSide::Remote(_) => None,
        }
    }

    /// Statuses the digital side has consumed; only known in process.
    pub fn observed_statuses(&self) -> Option<u64> {
        match &self.dt {
            DtSide::Local(dt) => Some(dt.monitor.statuses()),
            DtSide::Remote(_) => None,
        }
    }

    /// True once the digital side has consumed every response the PT sent;
    /// only known in process.
    pub fn settled(&self) -> bool {
        match &self.dt {
            DtSide::Local(dt) => {
                let m = &dt.monitor;
                m.statuses() + m.measurements() + m.dropped() == self.pt.transmitter.responses()
            }
            DtSide::Remote(_) => false,
        }
    }

    /// Lockstep: runs one scheduler round and returns its tick.
    pub fn step_round(&mut self) -> Result<u64, HarnessError> {
        match &mut self.exec {
            Exec::Lockstep { sched, next_tick } => {
                let t = *next_tick;
                sched.run_tick(t)?;
                *next_tick += 1;
                Ok(t)
            }
            Exec::Wall { .. } => Err(HarnessError::Unsupported("rounds exist only in lockstep".into())),
        }
    }

    /// Runs every tick before `t_ms` (lockstep) or sleeps until `t_ms` after
    /// the start (wall).
    pub fn advance_to(&mut self, t_ms: u64) -> Result<(), HarnessError> {
        match &mut self.exec {
            Exec::Lockstep { sched, next_tick } => {
                while *next_tick < t_ms {
                    sched.run_tick(*next_tick)?;
                    *next_tick += 1;
                }
            }
            Exec::Wall { start, .. } => {
                let target = *start + Duration::from_millis(t_ms);
                let now = Instant::now();
                if target > now {
                    thread::sleep(target - now);
                }
            }
        }
        Ok(())
    }

    /// Stops everything, lets the digital side drain and checks invariants.
    pub fn finish(self) -> Result<RunReport, HarnessError> {
        let Session { spec, exec, operator, dt, pt, assembly_flush } = self;
        drop(operator);
        let summary = match (exec, dt) {
            (Exec::Lockstep { .. }, DtSide::Local(local)) => local_summary(&local),
            (Exec::Wall { pt: pt_runner, dt: dt_runner, .. }, DtSide::Local(local)) => {
                pt_runner.join();
                wait_until(Duration::from_secs(5), || local.monitor.closed());
                settle(&local);
                if let Some(r) = dt_runner {
                    r.join();
                }
                local_summary(&local)
            }
            (Exec::Wall { pt: pt_runner, .. }, DtSide::Remote(remote)) => {
                pt_runner.join();
                remote.finish()?
            }
            (Exec::Lockstep { .. }, DtSide::Remote(_)) => unreachable!("rejected at start"),
        };
        if let Some(flush) = assembly_flush {
            flush()?;
        }
        build_report(spec, &pt, summary)
    }
}

fn wait_until(limit: Duration, mut done: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if done() {
            return true;
        }
        thread::sleep(Duration::from_millis(2));
    }
    done()
}

/// Waits until the digital side stops producing records.
fn settle(dt: &LocalDt) {
    let snapshot = || (dt.recorder.lock().entries().len(), dt.execute.as_ref().map(|e| e.sent() + e.rejected()));
    let mut last = snapshot();
    let mut stable = 0;
    let deadline = Instant::now() + Duration::from_secs(2);
    while stable < 5 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
        let now = snapshot();
        if now == last {
            stable += 1;
        } else {
            stable = 0;
            last = now;
        }
    }
}

fn local_summary(dt: &LocalDt) -> DtSummary {
    let _ = dt.recorder.flush();
    let records = dt.recorder.records();
    DtSummary {
        final_model: dt.keeper.snapshot(),
        trajectory: dt.keeper.trajectory(),
        pt_to_dt: dt.recorder.count(Direction::PtToDt),
        dt_to_pt: dt.recorder.count(Direction::DtToPt),
        statuses: dt.monitor.statuses(),
        measurements: dt.monitor.measurements(),
        sent: dt.execute.as_ref().map_or(0, |e| e.sent()),
        rejected: dt.execute.as_ref().map_or(0, |e| e.rejected()),
        records: Some(records),
    }
}

fn build_report(spec: RunSpec, pt: &PtHandles, summary: DtSummary) -> Result<RunReport, HarnessError> {
    let tx = &pt.transmitter;
    let mut failures = Vec::new();
    if spec.dt_mode == DtMode::Shadow && (summary.dt_to_pt != 0 || tx.uplink_commands() != 0) {
        failures.push(format!(
            "shadow reached the PT: {} DT2PT records, {} uplink frames",
            summary.dt_to_pt,
            tx.uplink_commands()
        ));
    }
    if summary.pt_to_dt != tx.responses() {
        failures.push(format!(
            "thread holds {} PT2DT records but {} frames crossed the ingest link",
            summary.pt_to_dt,
            tx.responses()
        ));
    }
    let uplink_ok = match spec.clock {
        ClockMode::Lockstep => summary.dt_to_pt == tx.uplink_commands(),
        // The PT stops first, so frames may still be in flight towards it.
        ClockMode::Wall => summary.dt_to_pt >= tx.uplink_commands(),
    };
    if !uplink_ok || summary.dt_to_pt != summary.sent {
        failures.push(format!(
            "thread holds {} DT2PT records; twin sent {}, PT received {}",
            summary.dt_to_pt,
            summary.sent,
            tx.uplink_commands()
        ));
    }

    let records = match (&summary.records, &spec.thread_path) {
        (Some(r), _) => Some(r.clone()),
        (None, Some(p)) => Some(thread_records(p)?),
        (None, None) => None,
    };
    if let Some(records) = records {
        let replayed = replay_into_shadow(records, spec.seed)?;
        let matches = match spec.dt_mode {
            DtMode::Shadow => replayed == summary.trajectory,
            // Gate commits change the period between statuses; states must agree.
            DtMode::Twin => replayed.iter().map(|s| s.current).eq(summary.trajectory.iter().map(|s| s.current)),
        };
        if !matches {
            failures.push(format!(
                "replaying the thread gave {} model states, the live run had {}",
                replayed.len(),
                summary.trajectory.len()
            ));
        }
    }

    let thread_sha256 = match &spec.thread_path {
        Some(p) => Some(sha256_file(p)?),
        None => None,
    };
    let control_log_entries = pt.control.lock().unwrap_or_else(|e| e.into_inner()).data_log.len();
    Ok(RunReport {
        backing: spec.backing,
        dt_mode: spec.dt_mode,
        clock: spec.clock,
        seed: spec.seed,
        final_model: summary.final_model,
        final_pt: pt.probe.get(),
        trajectory: summary.trajectory,
        pt_to_dt_records: summary.pt_to_dt,
        dt_to_pt_records: summary.dt_to_pt,
        ingest_frames: tx.responses(),
        uplink_frames: tx.uplink_commands(),
        operator_commands: tx.operator_commands(),
        gate_rejections: summary.rejected,
        control_log_entries,
        sensor_transcript: pt.sensor_driver.transcript().iter().map(|p| p.to_hex()).collect(),
        thread_path: spec.thread_path,
        thread_sha256,
        failures,
    })
}

fn thread_records(path: &Path) -> Result<Vec<ThreadRecord>, ThreadError> {
    Ok(read_thread(path)?
        .into_iter()
        .filter_map(|e| match e {
            ThreadEntry::Record(r) => Some(r),
            ThreadEntry::Annotation(_) => None,
        })
        .collect())
}

fn script_of(scenario: &Scenario) -> MeasurementScript {
    MeasurementScript::new(scenario.measure.iter().map(|m| (m.at, m.value)).collect())
}

enum Event {
    Command(i16),
    Model(OperatingState),
}

/// Runs a scenario end to end and reports the outcome.
pub fn run_scenario(cfg: &TwinConfig, scenario: &Scenario, spec: RunSpec) -> Result<RunReport, HarnessError> {
    scenario.validate()?;
    let mut events: Vec<(u64, usize, Event)> = scenario
        .inject
        .iter()
        .map(|i| (i.at, Event::Command(i.command)))
        .chain(scenario.model.iter().map(|m| (m.at, Event::Model(m.state))))
        .enumerate()
        .map(|(n, (at, e))| (at, n, e))
        .collect();
    // Stable by time; commands before model changes at equal times.
    events.sort_by_key(|(at, n, _)| (*at, *n));
    let mut session = Session::start(cfg, spec, script_of(scenario))?;
    for (at, _, event) in events {
        session.advance_to(at)?;
        match event {
            Event::Command(c) => session.operator_command(c)?,
            Event::Model(s) => session.inject_model(s)?,
        }
    }
    session.advance_to(scenario.duration_ms + 1)?;
    session.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordOutcome {
    pub report: RunReport,
    pub recording: PathBuf,
    pub recordings: usize,
}

/// Runs the scenario against the real sensor (watched by a shadow) and
/// writes the PT2DT part of the thread as an emulator recording.
pub fn record_session(
    cfg: &TwinConfig,
    scenario: &Scenario,
    mut spec: RunSpec,
    out: &Path,
) -> Result<RecordOutcome, HarnessError> {
    spec.backing = Backing::Real;
    spec.dt_mode = DtMode::Shadow;
    spec.isolation = Isolation::InProcess;
    let mut session_name = out.file_name().unwrap_or_default().to_os_string();
    session_name.push(".session");
    let thread = out.with_file_name(session_name);
    spec.thread_path = Some(thread.clone());
    let header = spec.header();
    let report = run_scenario(cfg, scenario, spec)?;
    let records = thread_records(&thread)?;
    let mut log = ThreadLog::create(out)?;
    log.annotate(0, header)?;
    let mut recordings = 0;
    for r in records {
        if r.direction != Direction::PtToDt {
            continue;
        }
        if let RecordBody::Message(m) = r.body {
            log.append_record(r.timestamp, Direction::PtToDt, RecordBody::Message(m))?;
            recordings += 1;
        }
    }
    log.flush()?;
    Ok(RecordOutcome { report, recording: out.to_path_buf(), recordings })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub records: usize,
    pub final_model: Option<TwinState>,
    pub trajectory: Vec<TwinState>,
}

/// Replays a thread file into a fresh shadow.
pub fn replay(path: &Path, pacing: crate::digital_thread::Pacing, seed: u64) -> Result<ReplayOutcome, HarnessError> {
    let records: Vec<ThreadRecord> = crate::digital_thread::replay_thread(path, pacing)?.collect();
    let count = records.len();
    let trajectory = replay_into_shadow(records, seed)?;
    Ok(ReplayOutcome { records: count, final_model: trajectory.last().copied(), trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Injection, MeasurementPoint, ModelInjection};

    fn three_commands() -> Scenario {
        Scenario {
            seed: 1,
            duration_ms: 1000,
            inject: vec![
                Injection { at: 0, command: 50 },
                Injection { at: 500, command: 0 },
                Injection { at: 900, command: -1 },
            ],
            measure: vec![MeasurementPoint { at: 0, value: 10 }, MeasurementPoint { at: 200, value: 20 }],
            model: Vec::new(),
        }
    }

    fn spec(dt: DtMode) -> RunSpec {
        let mut s = RunSpec::new(&TwinConfig::default(), &three_commands());
        s.dt_mode = dt;
        s
    }

    #[test]
    fn three_command_scenario_ends_off() {
        let r = run_scenario(&TwinConfig::default(), &three_commands(), spec(DtMode::Twin)).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.final_pt, Some(OperatingState::Off));
        assert_eq!(r.final_model.current, OperatingState::Off);
        assert_eq!(r.operator_commands, 3);
        assert_eq!(r.uplink_frames, 0);
        // Status per command, initial status, measurements every 50 ms while active.
        assert_eq!(r.pt_to_dt_records, 4 + 10);
    }

    #[test]
    fn empty_shadow_run_sees_initial_status_only() {
        let s = Scenario::default();
        let r = run_scenario(&TwinConfig::default(), &s, spec(DtMode::Shadow)).unwrap();
        assert!(r.passed());
        assert_eq!(r.pt_to_dt_records, 1);
        assert_eq!(r.dt_to_pt_records, 0);
    }

    #[test]
    fn twin_restores_injected_model() {
        let mut s = three_commands();
        s.inject.truncate(1);
        s.model.push(ModelInjection { at: 100, state: OperatingState::Standby });
        let r = run_scenario(&TwinConfig::default(), &s, spec(DtMode::Twin)).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.final_pt, Some(OperatingState::Standby));
        assert_eq!(r.uplink_frames, 1);
    }

    #[test]
    fn lockstep_runs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str, seed| {
            let mut sp = spec(DtMode::Twin);
            sp.seed = seed;
            sp.thread_path = Some(dir.path().join(name));
            run_scenario(&TwinConfig::default(), &three_commands(), sp).unwrap()
        };
        let a = run("a", 5);
        let b = run("b", 5);
        assert_eq!(a.thread_sha256, b.thread_sha256);
        let c = run("c", 6);
        assert_eq!((a.final_model, a.final_pt), (c.final_model, c.final_pt));
    }

    #[test]
    fn recorded_session_drives_the_prototype() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("three.thread");
        let scenario = three_commands();
        let recorded = record_session(&TwinConfig::default(), &scenario, spec(DtMode::Shadow), &rec).unwrap();
        assert_eq!(recorded.recordings as u64, recorded.report.pt_to_dt_records);
        let mut cfg = TwinConfig::default();
        cfg.pt.backing = Backing::Emulated;
        cfg.pt.recording = Some(rec);
        let mut sp = spec(DtMode::Twin);
        sp.backing = Backing::Emulated;
        let replayed = run_scenario(&cfg, &scenario, sp).unwrap();
        assert!(replayed.passed(), "{:?}", replayed.failures);
        assert_eq!(replayed.sensor_transcript, recorded.report.sensor_transcript);
        assert_eq!(replayed.final_pt, Some(OperatingState::Off));
    }

    #[test]
    fn processes_need_wall_clock() {
        let mut sp = spec(DtMode::Shadow);
        sp.isolation = Isolation::Processes;
        let err = run_scenario(&TwinConfig::default(), &three_commands(), sp).unwrap_err();
        assert!(err.is_config_error());
    }
}
