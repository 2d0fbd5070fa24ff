use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use twinloop::config::{Backing, DtConfig, DtMode, Scenario, TwinConfig};
use twinloop::digital_thread::Pacing;
use twinloop::harness::{self, DtControl, DtServeOptions, HarnessError, RunSpec};
use twinloop::sched::ClockMode;
use twinloop::template::{validate_template, TemplateError};

const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "twinloop", version, about = "Run physical twins, prototypes, shadows and twins from scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Twin configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file; an empty scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "lockstep")]
    mode: ClockMode,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "twinloop-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Physical twin (real sensor) with the configured digital side.
    RunPt(Common),
    /// Digital twin prototype (emulated sensor) with the configured digital side.
    RunDtp(Common),
    /// Configured backing observed by a digital shadow.
    RunShadow(Common),
    /// Configured backing coupled to a digital twin.
    RunTwin(Common),
    /// Run against the real sensor and write an emulator recording.
    Record(Common),
    /// Replay a thread file into a fresh shadow.
    Replay {
        thread: PathBuf,
        #[arg(long, default_value = "lockstep")]
        mode: ClockMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the outcome as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the lockstep regression suite.
    CiTest {
        #[arg(default_value = "ci/suite")]
        suite: PathBuf,
        #[arg(long, default_value = "target/ci-out")]
        out: PathBuf,
        /// Rewrite golden hashes instead of comparing them.
        #[arg(long)]
        bless: bool,
    },
    /// Check a template manifest.
    TemplateValidate { manifest: PathBuf },
    /// Serve the digital side of a process-isolated run.
    #[command(hide = true)]
    ServeDt {
        #[arg(long, value_parser = parse_dt)]
        dt: DtMode,
        #[arg(long, value_parser = parse_backing)]
        backing: Backing,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        twinning_rate_ms: u64,
        #[arg(long)]
        default_period_ms: i16,
        #[arg(long)]
        ingest_addr: String,
        #[arg(long)]
        uplink_addr: String,
        #[arg(long)]
        thread: Option<PathBuf>,
    },
}

fn parse_dt(s: &str) -> Result<DtMode, String> {
    match s {
        "shadow" => Ok(DtMode::Shadow),
        "twin" => Ok(DtMode::Twin),
        other => Err(format!("unknown digital side `{other}`")),
    }
}

fn parse_backing(s: &str) -> Result<Backing, String> {
    match s {
        "real" => Ok(Backing::Real),
        "emulated" => Ok(Backing::Emulated),
        other => Err(format!("unknown backing `{other}`")),
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<HarnessError>() {
            Some(h) if h.is_config_error() => CONFIG_ERROR,
            Some(_) => 1,
            None => CONFIG_ERROR,
        };
        Self { code, error }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: e.into() }
}

fn load(common: &Common) -> Result<(TwinConfig, Scenario), Failure> {
    let cfg = match &common.config {
        Some(p) => TwinConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TwinConfig::default(),
    };
    let mut scenario = match &common.scenario {
        Some(p) => Scenario::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Scenario::default(),
    };
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    Ok((cfg, scenario))
}

fn spec_for(common: &Common, cfg: &TwinConfig, scenario: &Scenario) -> Result<RunSpec, Failure> {
    let mut spec = RunSpec::new(cfg, scenario);
    spec.clock = common.mode;
    spec.dt_exe = Some(std::env::current_exe().map_err(runtime)?);
    std::fs::create_dir_all(&common.out).map_err(runtime)?;
    spec.thread_path = Some(common.out.join("thread.log"));
    Ok(spec)
}

fn write_json(dir: &Path, name: &str, json: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    std::fs::write(dir.join(name), json).map_err(runtime)?;
    Ok(())
}

fn run(common: &Common, backing: Option<Backing>, dt: Option<DtMode>) -> Result<u8, Failure> {
    let (cfg, scenario) = load(common)?;
    let mut spec = spec_for(common, &cfg, &scenario)?;
    if let Some(b) = backing {
        spec.backing = b;
    }
    if let Some(d) = dt {
        spec.dt_mode = d;
    }
    let report = harness::run_scenario(&cfg, &scenario, spec)?;
    let json = report.to_json();
    write_json(&common.out, "report.json", &json)?;
    println!("{json}");
    if report.passed() {
        Ok(0)
    } else {
        for f in &report.failures {
            eprintln!("invariant breach: {f}");
        }
        Ok(1)
    }
}

fn record(common: &Common) -> Result<u8, Failure> {
    let (cfg, scenario) = load(common)?;
    let spec = spec_for(common, &cfg, &scenario)?;
    let outcome = harness::record_session(&cfg, &scenario, spec, &common.out.join("recording.thread"))?;
    println!(
        "{}",
        serde_json::json!({
            "recording": outcome.recording,
            "recordings": outcome.recordings,
            "thread_sha256": outcome.report.thread_sha256,
            "failures": outcome.report.failures,
        })
    );
    Ok(if outcome.report.passed() { 0 } else { 1 })
}

fn replay(thread: &Path, mode: ClockMode, seed: u64, out: Option<&Path>) -> Result<u8, Failure> {
    let pacing = match mode {
        ClockMode::Wall => Pacing::WallClock,
        ClockMode::Lockstep => Pacing::Collapsed,
    };
    let outcome = harness::replay(thread, pacing, seed).map_err(|e| Failure { code: CONFIG_ERROR, error: e.into() })?;
    let json = serde_json::to_string_pretty(&outcome).map_err(runtime)?;
    if let Some(dir) = out {
        write_json(dir, "replay.json", &json)?;
    }
    println!("{json}");
    Ok(0)
}

fn ci_test(suite: &Path, out: &Path, bless: bool) -> Result<u8, Failure> {
    let started = std::time::Instant::now();
    let report = harness::ci_test(suite, out, bless)?;
    for case in &report.cases {
        println!("{case}");
    }
    println!(
        "{} passed, {} failed in {:.2}s",
        report.cases.len() - report.failed(),
        report.failed(),
        started.elapsed().as_secs_f64()
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn template_validate(manifest: &Path) -> Result<u8, Failure> {
    match validate_template(manifest) {
        Ok(t) => {
            let names = |set: &std::collections::BTreeSet<_>| {
                set.iter().map(|s: &twinloop::model::OperatingState| s.name()).collect::<Vec<_>>().join(",")
            };
            println!(
                "valid: {} document(s), software {}, states {{{}}}, initial {}, final {{{}}}",
                t.manifest.documents.len(),
                t.manifest.software.reference,
                names(t.model.states()),
                t.model.initial(),
                names(t.model.finals())
            );
            Ok(0)
        }
        Err(report) => {
            eprintln!("{report}");
            let parse = report.errors.iter().any(|e| matches!(e, TemplateError::ParseError(_)));
            Ok(if parse { CONFIG_ERROR } else { 1 })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn serve_dt(
    dt: DtMode,
    backing: Backing,
    seed: u64,
    twinning_rate_ms: u64,
    default_period_ms: i16,
    ingest_addr: String,
    uplink_addr: String,
    thread: Option<PathBuf>,
) -> Result<u8, Failure> {
    let opts = DtServeOptions {
        dt: DtConfig { mode: dt, twinning_rate_ms, default_period_ms, ingest_addr, uplink_addr },
        seed,
        backing,
        thread,
    };
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if let Some(c) = DtControl::parse(&line) {
                if tx.send(c).is_err() {
                    break;
                }
            }
        }
    });
    let summary = harness::serve_dt(&opts, |ready| println!("{ready}"), rx)?;
    println!("SUMMARY {}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::RunPt(c) => run(&c, Some(Backing::Real), None),
        Cmd::RunDtp(c) => run(&c, Some(Backing::Emulated), None),
        Cmd::RunShadow(c) => run(&c, None, Some(DtMode::Shadow)),
        Cmd::RunTwin(c) => run(&c, None, Some(DtMode::Twin)),
        Cmd::Record(c) => record(&c),
        Cmd::Replay { thread, mode, seed, out } => replay(&thread, mode, seed, out.as_deref()),
        Cmd::CiTest { suite, out, bless } => ci_test(&suite, &out, bless),
        Cmd::TemplateValidate { manifest } => template_validate(&manifest),
        Cmd::ServeDt { dt, backing, seed, twinning_rate_ms, default_period_ms, ingest_addr, uplink_addr, thread } => {
            serve_dt(dt, backing, seed, twinning_rate_ms, default_period_ms, ingest_addr, uplink_addr, thread)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
