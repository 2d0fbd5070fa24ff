//! Cooperative task model shared by both clock modes.
//!
//! Every component is a [`Task`] with a non-blocking `poll`. In lockstep mode
//! a [`LockstepScheduler`] polls all tasks in a seeded order until nothing
//! moves, once per logical tick. In wall-clock mode a [`WallRunner`] gives each
//! task its own thread.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Moved at least one item.
    Progress,
    /// Nothing to do right now.
    Idle,
    /// Finished for good (teardown).
    Done,
}

pub trait Task: Send {
    fn name(&self) -> &str;
    fn poll(&mut self) -> Step;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Wall,
    #[default]
    Lockstep,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(Self::Wall),
            "lockstep" => Ok(Self::Lockstep),
            other => Err(format!("unknown clock mode `{other}` (expected wall|lockstep)")),
        }
    }
}

/// Time source. Logical clocks count ticks (one tick = one millisecond of
/// scenario time); wall clocks measure from construction.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall(Instant),
    Logical(Arc<AtomicU64>),
}

impl Clock {
    pub fn wall() -> Self {
        Self::Wall(Instant::now())
    }

    pub fn logical() -> Self {
        Self::Logical(Arc::new(AtomicU64::new(0)))
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Self::Wall(_) => ClockMode::Wall,
            Self::Logical(_) => ClockMode::Lockstep,
        }
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Self::Wall(start) => start.elapsed().as_millis() as u64,
            Self::Logical(tick) => tick.load(Ordering::SeqCst),
        }
    }

    /// Scenario time in nanoseconds; a tick counts as one millisecond.
    pub fn now_ns(&self) -> u64 {
        match self {
            Self::Wall(start) => start.elapsed().as_nanos() as u64,
            Self::Logical(tick) => tick.load(Ordering::SeqCst) * 1_000_000,
        }
    }

    /// Nanoseconds represented by one unit of [`Clock::stamp`].
    pub fn stamp_unit_ns(&self) -> u64 {
        match self {
            Self::Wall(_) => 1,
            Self::Logical(_) => 1_000_000,
        }
    }

    /// Timestamp written to thread records: nanoseconds or the tick number.
    pub fn stamp(&self) -> u64 {
        match self {
            Self::Wall(start) => start.elapsed().as_nanos() as u64,
            Self::Logical(tick) => tick.load(Ordering::SeqCst),
        }
    }

    pub fn set_tick(&self, tick: u64) {
        if let Self::Logical(t) = self {
            t.store(tick, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("tick {tick} did not settle after {passes} passes (livelock in {task})")]
    Livelock { tick: u64, passes: usize, task: String },
}

/// Upper bound on polling passes inside one tick.
pub const MAX_PASSES_PER_TICK: usize = 100_000;

pub struct LockstepScheduler {
    tasks: Vec<Option<Box<dyn Task>>>,
    clock: Clock,
    rng: ChaCha8Rng,
    tick: u64,
}

impl LockstepScheduler {
    pub fn new(clock: Clock, seed: u64) -> Self {
        Self { tasks: Vec::new(), clock, rng: ChaCha8Rng::seed_from_u64(seed), tick: 0 }
    }

    pub fn spawn(&mut self, task: Box<dyn Task>) {
        self.tasks.push(Some(task));
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn live_tasks(&self) -> usize {
        self.tasks.iter().filter(|t| t.is_some()).count()
    }

    /// Runs one round at `tick`: polls every live task in a seeded order,
    /// pass after pass, until a full pass makes no progress.
    pub fn run_tick(&mut self, tick: u64) -> Result<(), SchedError> {
        self.tick = tick;
        self.clock.set_tick(tick);
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        for _ in 0..MAX_PASSES_PER_TICK {
            order.shuffle(&mut self.rng);
            let mut progressed = false;
            for &i in &order {
                let Some(task) = self.tasks[i].as_mut() else { continue };
                match task.poll() {
                    Step::Progress => progressed = true,
                    Step::Idle => {}
                    Step::Done => {
                        self.tasks[i] = None;
                        progressed = true;
                    }
                }
            }
            if !progressed {
                return Ok(());
            }
        }
        let task = self
            .tasks
            .iter()
            .flatten()
            .map(|t| t.name().to_string())
            .next()
            .unwrap_or_default();
        Err(SchedError::Livelock { tick, passes: MAX_PASSES_PER_TICK, task })
    }

    /// Polls until every task reports `Done` or a pass makes no progress.
    pub fn drain(&mut self) -> Result<(), SchedError> {
        let tick = self.tick;
        self.run_tick(tick)
    }
}

/// Runs each task on a dedicated thread until it finishes or `stop` is called.
pub struct WallRunner {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    idle_backoff: Duration,
}

impl WallRunner {
    pub fn new() -> Self {
        Self::with_backoff(Duration::from_micros(200))
    }

    pub fn with_backoff(idle_backoff: Duration) -> Self {
        Self { stop: Arc::new(AtomicBool::new(false)), handles: Vec::new(), idle_backoff }
    }

    pub fn spawn(&mut self, mut task: Box<dyn Task>) {
        let stop = Arc::clone(&self.stop);
        let backoff = self.idle_backoff;
        let name = task.name().to_string();
        let handle = thread::Builder::new()
            .name(name)
            .spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match task.poll() {
                        Step::Progress => {}
                        Step::Idle => thread::sleep(backoff),
                        Step::Done => break,
                    }
                }
            })
            .expect("spawn task thread");
        self.handles.push(handle);
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    /// Signals every task to stop and waits for the threads.
    pub fn join(mut self) {
        self.stop();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Default for WallRunner {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Counter {
        name: String,
        remaining: u32,
        log: Arc<Mutex<Vec<String>>>,
    }

    impl Task for Counter {
        fn name(&self) -> &str {
            &self.name
        }

        fn poll(&mut self) -> Step {
            if self.remaining == 0 {
                return Step::Idle;
            }
            self.remaining -= 1;
            self.log.lock().unwrap().push(self.name.clone());
            Step::Progress
        }
    }

    fn run(seed: u64) -> Vec<String> {
        let log = Arc::new(Mutex::new(Vec::new()));
        let mut s = LockstepScheduler::new(Clock::logical(), seed);
        for name in ["a", "b", "c"] {
            s.spawn(Box::new(Counter { name: name.into(), remaining: 3, log: log.clone() }));
        }
        s.run_tick(0).unwrap();
        let out = log.lock().unwrap().clone();
        out
    }

    #[test]
    fn tick_runs_to_quiescence() {
        assert_eq!(run(1).len(), 9);
    }

    #[test]
    fn same_seed_same_interleaving() {
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn logical_clock_follows_ticks() {
        let clock = Clock::logical();
        let mut s = LockstepScheduler::new(clock.clone(), 0);
        s.run_tick(42).unwrap();
        assert_eq!(clock.now_ms(), 42);
        assert_eq!(clock.stamp(), 42);
    }

    struct Spinner;

    impl Task for Spinner {
        fn name(&self) -> &str {
            "spinner"
        }

        fn poll(&mut self) -> Step {
            Step::Progress
        }
    }

    #[test]
    fn livelock_is_reported() {
        let mut s = LockstepScheduler::new(Clock::logical(), 0);
        s.spawn(Box::new(Spinner));
        assert!(matches!(s.run_tick(0), Err(SchedError::Livelock { .. })));
    }
}
