//! Monitor, Analyze, Plan and Execute over shared knowledge.
//!
//! A digital shadow runs Monitor and Analyze only and owns no uplink at all.
//! A digital twin adds Plan and Execute; Execute checks every planned command
//! against the digital model before it goes out on the uplink.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::bus::{topics, Consumer, EventBus, Producer, Topic};
use crate::config::{DtConfig, DtMode};
use crate::digital_thread::{tap_channel, Direction, KnowledgeStore, ThreadLog, ThreadRecord, ThreadRecorder};
use crate::machine::{StateMachineDef, TwinState};
use crate::model::{decode_message, encode_message, BitPayload, Message, OperatingState, Protocol};
use crate::sched::{Clock, ClockMode, LockstepScheduler, SchedError, Step, Task};
use crate::transport::{pipe_pair, Connection};

const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusObservation {
    pub pt_state: OperatingState,
    pub model: TwinState,
    /// Raised by a model change rather than by a fresh status from the PT.
    pub resync: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisResult {
    pub pt_state: OperatingState,
    pub model_state: OperatingState,
    pub equal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanResult {
    pub target_state: OperatingState,
    pub command: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtEvent {
    Status(StatusObservation),
    Measurement(i32),
    Analysis(AnalysisResult),
    Plan(PlanResult),
    Command(Message),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("gate rejected {command}: model {model:?} would reach {reached}, plan targets {target}")]
pub struct GateRejected {
    pub model: TwinState,
    pub command: Message,
    pub target: OperatingState,
    pub reached: OperatingState,
}

#[derive(Debug)]
struct Knowledge {
    def: StateMachineDef,
    model: TwinState,
    last_pt: Option<OperatingState>,
    trajectory: Vec<TwinState>,
    dirty: bool,
    store: KnowledgeStore,
}

/// Owner of the digital model. Monitor updates, model injections and gate
/// checks are serialized through one lock, so no stage sees a torn state.
#[derive(Debug, Clone)]
pub struct ModelKeeper(Arc<Mutex<Knowledge>>);

impl ModelKeeper {
    pub fn new(def: StateMachineDef) -> Self {
        let model = def.initial_state();
        Self(Arc::new(Mutex::new(Knowledge {
            def,
            model,
            last_pt: None,
            trajectory: Vec::new(),
            dirty: false,
            store: KnowledgeStore::new(),
        })))
    }

    fn lock(&self) -> MutexGuard<'_, Knowledge> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> TwinState {
        self.lock().model
    }

    pub fn last_pt_state(&self) -> Option<OperatingState> {
        self.lock().last_pt
    }

    /// Model state after every status update, in order.
    pub fn trajectory(&self) -> Vec<TwinState> {
        self.lock().trajectory.clone()
    }

    pub fn knowledge_len(&self) -> usize {
        self.lock().store.len()
    }

    /// Applies an observed PT status to the model.
    pub fn apply_status(&self, observed: OperatingState) -> TwinState {
        let mut k = self.lock();
        let status = Message::Status(observed);
        k.model = k.def.process_event(k.model, &status).expect("statuses are always processed");
        k.last_pt = Some(observed);
        let model = k.model;
        k.trajectory.push(model);
        k.store.observe(Direction::PtToDt, status);
        model
    }

    pub fn observe_measurement(&self, value: i32) {
        self.lock().store.observe(Direction::PtToDt, Message::Measurement(value));
    }

    /// Changes the model from outside the loop (operator or test).
    pub fn inject(&self, state: OperatingState) {
        let mut k = self.lock();
        k.model.current = state;
        k.dirty = true;
        k.store.note(format!("model-injection state={state}"));
    }

    /// Replaces the whole model; used to set up gate experiments.
    pub fn set_model(&self, model: TwinState) {
        self.lock().model = model;
    }

    fn take_dirty(&self) -> bool {
        std::mem::take(&mut self.lock().dirty)
    }

    /// Simulates `plan.command` on a copy of the model. Commits and returns the
    /// new model only if it lands on the planned target.
    pub fn gate(&self, plan: &PlanResult) -> Result<TwinState, GateRejected> {
        let mut k = self.lock();
        let reached = k.def.process_event(k.model, &plan.command).map(|s| s.current);
        match reached {
            Ok(state) if state == plan.target_state => {
                let next = k.def.process_event(k.model, &plan.command).expect("checked above");
                k.model = next;
                k.store.observe(Direction::DtToPt, plan.command);
                Ok(next)
            }
            other => Err(GateRejected {
                model: k.model,
                command: plan.command,
                target: plan.target_state,
                reached: other.unwrap_or(k.model.current),
            }),
        }
    }
}

impl Default for ModelKeeper {
    fn default() -> Self {
        Self::new(StateMachineDef::builtin())
    }
}

fn topic(name: &str) -> Topic {
    Topic::new(name).expect("fixed topic names are non-empty")
}

fn annotate(recorder: &Option<ThreadRecorder>, text: impl FnOnce() -> String) {
    if let Some(r) = recorder {
        r.annotate(text());
    }
}

#[derive(Debug, Default)]
pub struct MonitorStats {
    pub statuses: AtomicU64,
    pub measurements: AtomicU64,
    pub dropped: AtomicU64,
    pub closed: std::sync::atomic::AtomicBool,
}

impl MonitorStats {
    /// True once the ingest link has gone away.
    pub fn closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn statuses(&self) -> u64 {
        self.statuses.load(Ordering::SeqCst)
    }

    pub fn measurements(&self) -> u64 {
        self.measurements.load(Ordering::SeqCst)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::SeqCst)
    }
}

/// Reads the PT ingest, keeps the model in step with observed statuses and
/// relays measurements.
pub struct Monitor {
    ingest: Box<dyn Connection>,
    keeper: ModelKeeper,
    status_out: Producer<DtEvent>,
    measurement_out: Producer<DtEvent>,
    clock: Clock,
    twinning_rate_ms: u64,
    next_cycle_ms: u64,
    stats: Arc<MonitorStats>,
}

impl Monitor {
    pub fn new(
        ingest: Box<dyn Connection>,
        keeper: ModelKeeper,
        bus: &EventBus<DtEvent>,
        clock: Clock,
        twinning_rate_ms: u64,
    ) -> Self {
        Self {
            ingest,
            keeper,
            status_out: bus.producer(&topic(topics::DT_STATUS)),
            measurement_out: bus.producer(&topic(topics::DT_MEASUREMENT)),
            clock,
            twinning_rate_ms,
            next_cycle_ms: 0,
            stats: Arc::new(MonitorStats::default()),
        }
    }

    pub fn stats(&self) -> Arc<MonitorStats> {
        Arc::clone(&self.stats)
    }

    /// Handles one ingested message and returns what was emitted.
    pub fn monitor_step(&self, ev: Message) -> Option<DtEvent> {
        match ev {
            Message::Status(observed) => {
                let model = self.keeper.apply_status(observed);
                self.stats.statuses.fetch_add(1, Ordering::SeqCst);
                let out = DtEvent::Status(StatusObservation { pt_state: observed, model, resync: false });
                self.status_out.emit(out);
                Some(out)
            }
            Message::Measurement(v) => {
                self.keeper.observe_measurement(v);
                self.stats.measurements.fetch_add(1, Ordering::SeqCst);
                let out = DtEvent::Measurement(v);
                self.measurement_out.emit(out);
                Some(out)
            }
            Message::Command(_) => {
                self.stats.dropped.fetch_add(1, Ordering::SeqCst);
                None
            }
        }
    }

    fn cycle_due(&mut self) -> bool {
        if self.clock.mode() == ClockMode::Lockstep {
            return true;
        }
        let now = self.clock.now_ms();
        if now < self.next_cycle_ms {
            return false;
        }
        self.next_cycle_ms = now + self.twinning_rate_ms;
        true
    }

    fn step(&mut self) -> Result<bool, ()> {
        if !self.cycle_due() {
            return Ok(false);
        }
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.status_out.can_emit() || !self.measurement_out.can_emit() {
                break;
            }
            match self.ingest.try_read_frame() {
                Ok(Some(frame)) => {
                    moved = true;
                    match decode_message(&frame) {
                        Ok(m) => {
                            self.monitor_step(m);
                        }
                        Err(_) => {
                            self.stats.dropped.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                }
                Ok(None) => break,
                Err(_) => return Err(()),
            }
        }
        // An injection stays pending until there is a PT state to compare with.
        if let Some(pt_state) = self.keeper.last_pt_state() {
            if self.keeper.take_dirty() {
                let model = self.keeper.snapshot();
                self.status_out.emit(DtEvent::Status(StatusObservation { pt_state, model, resync: true }));
                moved = true;
            }
        }
        Ok(moved)
    }
}

impl Task for Monitor {
    fn name(&self) -> &str {
        "dt.monitor"
    }

    fn poll(&mut self) -> Step {
        match self.step() {
            Ok(true) => Step::Progress,
            Ok(false) => Step::Idle,
            Err(()) => {
                self.stats.closed.store(true, Ordering::SeqCst);
                Step::Done
            }
        }
    }
}

/// Compares each observed PT state with the model.
pub struct Analyze {
    input: Consumer<DtEvent>,
    output: Producer<DtEvent>,
    recorder: Option<ThreadRecorder>,
    results: Arc<AtomicU64>,
    mismatches: Arc<AtomicU64>,
}

impl Analyze {
    pub fn new(bus: &EventBus<DtEvent>, recorder: Option<ThreadRecorder>) -> Self {
        Self {
            input: bus.subscribe(&topic(topics::DT_STATUS)),
            output: bus.producer(&topic(topics::DT_ANALYSIS)),
            recorder,
            results: Arc::default(),
            mismatches: Arc::default(),
        }
    }

    /// (results, mismatches) so far.
    pub fn counters(&self) -> (Arc<AtomicU64>, Arc<AtomicU64>) {
        (Arc::clone(&self.results), Arc::clone(&self.mismatches))
    }

    /// Compares against the model as it stood right after the observation, so
    /// a batch of statuses never pairs an old PT state with a newer model.
    pub fn analyze_step(&self, obs: &StatusObservation) -> AnalysisResult {
        let model_state = obs.model.current;
        let result = AnalysisResult { pt_state: obs.pt_state, model_state, equal: obs.pt_state == model_state };
        self.results.fetch_add(1, Ordering::SeqCst);
        if !result.equal {
            self.mismatches.fetch_add(1, Ordering::SeqCst);
            annotate(&self.recorder, || format!("analysis pt={} model={} equal=false", result.pt_state, model_state));
        }
        self.output.emit(DtEvent::Analysis(result));
        result
    }
}

impl Task for Analyze {
    fn name(&self) -> &str {
        "dt.analyze"
    }

    fn poll(&mut self) -> Step {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.output.can_emit() {
                break;
            }
            match self.input.try_consume() {
                Ok(Some(DtEvent::Status(obs))) => {
                    self.analyze_step(&obs);
                    moved = true;
                }
                Ok(Some(_)) => moved = true,
                Ok(None) => break,
                Err(_) => return Step::Done,
            }
        }
        if moved {
            Step::Progress
        } else {
            Step::Idle
        }
    }
}

/// Turns a mismatch into a command that steers the PT toward the model.
pub struct Plan {
    input: Consumer<DtEvent>,
    output: Producer<DtEvent>,
    default_period_ms: i16,
    recorder: Option<ThreadRecorder>,
}

impl Plan {
    pub fn new(bus: &EventBus<DtEvent>, default_period_ms: i16, recorder: Option<ThreadRecorder>) -> Self {
        Self {
            input: bus.subscribe(&topic(topics::DT_ANALYSIS)),
            output: bus.producer(&topic(topics::DT_PLAN)),
            default_period_ms,
            recorder,
        }
    }

    pub fn plan_step(&self, a: &AnalysisResult) -> Option<PlanResult> {
        if a.equal {
            return None;
        }
        let command = reconcile(a.model_state, self.default_period_ms);
        let plan = PlanResult { target_state: a.model_state, command };
        annotate(&self.recorder, || format!("plan target={} command={}", plan.target_state, command.value()));
        self.output.emit(DtEvent::Plan(plan));
        Some(plan)
    }
}

/// The command that moves a non-final PT into `target`.
pub fn reconcile(target: OperatingState, default_period_ms: i16) -> Message {
    match target {
        OperatingState::Active => Message::Command(default_period_ms),
        OperatingState::Standby => Message::Command(0),
        OperatingState::Off => Message::Command(-1),
    }
}

impl Task for Plan {
    fn name(&self) -> &str {
        "dt.plan"
    }

    fn poll(&mut self) -> Step {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.output.can_emit() {
                break;
            }
            match self.input.try_consume() {
                Ok(Some(DtEvent::Analysis(a))) => {
                    self.plan_step(&a);
                    moved = true;
                }
                Ok(Some(_)) => moved = true,
                Ok(None) => break,
                Err(_) => return Step::Done,
            }
        }
        if moved {
            Step::Progress
        } else {
            Step::Idle
        }
    }
}

#[derive(Debug, Default)]
pub struct ExecuteStats {
    pub sent: AtomicU64,
    pub rejected: AtomicU64,
}

impl ExecuteStats {
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::SeqCst)
    }
}

/// Sends a planned command only if the model agrees with where it leads.
pub struct Execute {
    input: Consumer<DtEvent>,
    output: Producer<DtEvent>,
    keeper: ModelKeeper,
    recorder: Option<ThreadRecorder>,
    stats: Arc<ExecuteStats>,
}

impl Execute {
    pub fn new(bus: &EventBus<DtEvent>, keeper: ModelKeeper, recorder: Option<ThreadRecorder>) -> Self {
        Self {
            input: bus.subscribe(&topic(topics::DT_PLAN)),
            output: bus.producer(&topic(topics::DT_EXECUTE)),
            keeper,
            recorder,
            stats: Arc::new(ExecuteStats::default()),
        }
    }

    pub fn stats(&self) -> Arc<ExecuteStats> {
        Arc::clone(&self.stats)
    }

    pub fn execute_step(&self, plan: &PlanResult) -> Result<TwinState, GateRejected> {
        match self.keeper.gate(plan) {
            Ok(model) => {
                annotate(&self.recorder, || format!("execute command={} target={}", plan.command.value(), plan.target_state));
                self.output.emit(DtEvent::Command(plan.command));
                self.stats.sent.fetch_add(1, Ordering::SeqCst);
                Ok(model)
            }
            Err(rejected) => {
                annotate(&self.recorder, || {
                    format!(
                        "gate-rejected command={} target={} reached={}",
                        rejected.command.value(),
                        rejected.target,
                        rejected.reached
                    )
                });
                self.stats.rejected.fetch_add(1, Ordering::SeqCst);
                Err(rejected)
            }
        }
    }
}

impl Task for Execute {
    fn name(&self) -> &str {
        "dt.execute"
    }

    fn poll(&mut self) -> Step {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.output.can_emit() {
                break;
            }
            match self.input.try_consume() {
                Ok(Some(DtEvent::Plan(p))) => {
                    let _ = self.execute_step(&p);
                    moved = true;
                }
                Ok(Some(_)) => moved = true,
                Ok(None) => break,
                Err(_) => return Step::Done,
            }
        }
        if moved {
            Step::Progress
        } else {
            Step::Idle
        }
    }
}

/// Writes executed commands to the uplink connection.
pub struct UplinkSender {
    input: Consumer<DtEvent>,
    uplink: Box<dyn Connection>,
}

impl UplinkSender {
    pub fn new(bus: &EventBus<DtEvent>, uplink: Box<dyn Connection>) -> Self {
        Self { input: bus.subscribe(&topic(topics::DT_EXECUTE)), uplink }
    }
}

impl Task for UplinkSender {
    fn name(&self) -> &str {
        "dt.uplink"
    }

    fn poll(&mut self) -> Step {
        let mut moved = false;
        for _ in 0..BATCH {
            if !self.uplink.can_write() {
                break;
            }
            match self.input.try_consume() {
                Ok(Some(DtEvent::Command(cmd))) => {
                    if self.uplink.write_frame(&encode_message(&cmd)).is_err() {
                        return Step::Done;
                    }
                    moved = true;
                }
                Ok(Some(_)) => moved = true,
                Ok(None) => break,
                Err(_) => return Step::Done,
            }
        }
        if moved {
            Step::Progress
        } else {
            Step::Idle
        }
    }
}

/// A wired shadow or twin.
pub struct DtAssembly {
    pub mode: DtMode,
    pub tasks: Vec<Box<dyn Task>>,
    pub bus: EventBus<DtEvent>,
    pub keeper: ModelKeeper,
    pub monitor: Arc<MonitorStats>,
    pub analysis: (Arc<AtomicU64>, Arc<AtomicU64>),
    pub execute: Option<Arc<ExecuteStats>>,
    has_uplink: bool,
}

impl DtAssembly {
    pub fn has_uplink(&self) -> bool {
        self.has_uplink
    }
}

fn observe_stages(
    cfg: &DtConfig,
    ingest: Box<dyn Connection>,
    recorder: Option<&ThreadRecorder>,
    clock: &Clock,
) -> (EventBus<DtEvent>, ModelKeeper, Monitor, Analyze) {
    let bus = EventBus::new();
    let keeper = ModelKeeper::default();
    let ingest: Box<dyn Connection> = match recorder {
        Some(r) => Box::new(tap_channel(ingest, Direction::PtToDt, r)),
        None => ingest,
    };
    let monitor = Monitor::new(ingest, keeper.clone(), &bus, clock.clone(), cfg.twinning_rate_ms);
    let analyze = Analyze::new(&bus, recorder.cloned());
    (bus, keeper, monitor, analyze)
}

/// Monitor and Analyze over the ingest link. There is no uplink.
pub fn assemble_shadow(
    cfg: &DtConfig,
    ingest: Box<dyn Connection>,
    recorder: Option<&ThreadRecorder>,
    clock: &Clock,
) -> DtAssembly {
    let (bus, keeper, monitor, analyze) = observe_stages(cfg, ingest, recorder, clock);
    DtAssembly {
        mode: DtMode::Shadow,
        monitor: monitor.stats(),
        analysis: analyze.counters(),
        tasks: vec![Box::new(monitor), Box::new(analyze)],
        bus,
        keeper,
        execute: None,
        has_uplink: false,
    }
}

/// All four stages plus the uplink back to the PT.
pub fn assemble_twin_dt(
    cfg: &DtConfig,
    ingest: Box<dyn Connection>,
    uplink: Box<dyn Connection>,
    recorder: Option<&ThreadRecorder>,
    clock: &Clock,
) -> DtAssembly {
    let (bus, keeper, monitor, analyze) = observe_stages(cfg, ingest, recorder, clock);
    let plan = Plan::new(&bus, cfg.default_period_ms, recorder.cloned());
    let execute = Execute::new(&bus, keeper.clone(), recorder.cloned());
    let uplink: Box<dyn Connection> = match recorder {
        Some(r) => Box::new(tap_channel(uplink, Direction::DtToPt, r)),
        None => uplink,
    };
    let sender = UplinkSender::new(&bus, uplink);
    DtAssembly {
        mode: DtMode::Twin,
        monitor: monitor.stats(),
        analysis: analyze.counters(),
        execute: Some(execute.stats()),
        tasks: vec![Box::new(monitor), Box::new(analyze), Box::new(plan), Box::new(execute), Box::new(sender)],
        bus,
        keeper,
        has_uplink: true,
    }
}

/// Feeds the PT2DT records of a thread through a fresh shadow and returns the
/// model trajectory it produces.
pub fn replay_into_shadow(
    records: impl IntoIterator<Item = ThreadRecord>,
    seed: u64,
) -> Result<Vec<TwinState>, SchedError> {
    let frames: Vec<BitPayload> = records
        .into_iter()
        .filter(|r| r.direction == Direction::PtToDt)
        .map(|r| match r.body {
            crate::digital_thread::RecordBody::Message(m) => encode_message(&m),
            crate::digital_thread::RecordBody::Raw(p) => p,
        })
        .collect();
    let clock = Clock::logical();
    let (mut feed, ingest) = pipe_pair(Protocol::Tcp, "replay", "replay.ingest", 1024);
    let cfg = DtConfig { mode: DtMode::Shadow, ..DtConfig::default() };
    let recorder = ThreadRecorder::new(ThreadLog::in_memory(), clock.clone());
    let shadow = assemble_shadow(&cfg, Box::new(ingest), Some(&recorder), &clock);
    let keeper = shadow.keeper.clone();
    let mut sched = LockstepScheduler::new(clock, seed);
    for t in shadow.tasks {
        sched.spawn(t);
    }
    let mut pending = frames.iter();
    let mut next = pending.next();
    let mut tick = 0;
    loop {
        while let Some(f) = next {
            if !feed.can_write() {
                break;
            }
            feed.write_frame(f).expect("replay feed is open");
            next = pending.next();
        }
        sched.run_tick(tick)?;
        tick += 1;
        if next.is_none() && feed.pending() == 0 {
            break;
        }
    }
    Ok(keeper.trajectory())
}
