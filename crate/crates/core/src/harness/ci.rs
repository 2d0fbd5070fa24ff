//! Lockstep regression suite. Each `*.toml` case in the suite directory names
//! a scenario and optional config, expectations on the outcome, and is
//! checked against the thread hash stored next to it in `<case>.sha256`.
//!
//! ```toml
//! scenario = "scenarios/three_commands.toml"
//! config = "configs/prototype.toml"   # optional, defaults apply otherwise
//! dt = "twin"                         # optional, overrides the config
//! backing = "emulated"                # optional, overrides the config
//! seed = 7                            # optional, overrides the scenario
//!
//! [expect]
//! final_model = "OFF"
//! final_pt = "OFF"
//! uplink_frames = 0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{run_scenario, RunReport, RunSpec};
use crate::config::{Backing, DtMode, Isolation, Scenario, TwinConfig};
use crate::model::OperatingState;
use crate::sched::ClockMode;

#[derive(Debug, Error)]
pub enum CiError {
    #[error("suite {path}: {message}")]
    Suite { path: PathBuf, message: String },
    #[error("case {case}: {message}")]
    Case { case: String, message: String },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub final_model: Option<OperatingState>,
    pub final_pt: Option<OperatingState>,
    pub pt_to_dt: Option<u64>,
    pub dt_to_pt: Option<u64>,
    pub uplink_frames: Option<u64>,
    pub gate_rejections: Option<u64>,
    /// Compare the thread hash with `<case>.sha256`.
    #[serde(default = "yes")]
    pub golden: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub scenario: PathBuf,
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub dt: Option<DtMode>,
    #[serde(default)]
    pub backing: Option<Backing>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub expect: Expectations,
}

struct LoadedCase {
    name: String,
    golden: PathBuf,
    cfg: TwinConfig,
    scenario: Scenario,
    spec: RunSpec,
    expect: Expectations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub name: String,
    pub problems: Vec<String>,
    pub thread_sha256: Option<String>,
    pub report: Option<RunReport>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

impl fmt::Display for CaseOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "PASS {}", self.name)
        } else {
            write!(f, "FAIL {}: {}", self.name, self.problems.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseOutcome::passed)
    }

    pub fn failed(&self) -> usize {
        self.cases.iter().filter(|c| !c.passed()).count()
    }
}

fn load_case(path: &Path, out: &Path) -> Result<LoadedCase, CiError> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("case").to_string();
    let err = |message: String| CiError::Case { case: name.clone(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let case: CaseFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let scenario = Scenario::load(&base.join(&case.scenario)).map_err(|e| err(e.to_string()))?;
    let cfg = match &case.config {
        Some(c) => TwinConfig::load(&base.join(c)).map_err(|e| err(e.to_string()))?,
        None => TwinConfig::default(),
    };
    let mut spec = RunSpec::new(&cfg, &scenario);
    spec.clock = ClockMode::Lockstep;
    spec.isolation = Isolation::InProcess;
    spec.backing = case.backing.unwrap_or(cfg.pt.backing);
    spec.dt_mode = case.dt.unwrap_or(cfg.dt.mode);
    spec.seed = case.seed.unwrap_or(scenario.seed);
    spec.thread_path = Some(out.join(format!("{name}.thread")));
    if spec.backing == Backing::Emulated && cfg.pt.recording.as_ref().is_none_or(|p| !p.is_file()) {
        return Err(err("emulated backing needs an existing pt.recording".into()));
    }
    Ok(LoadedCase { golden: path.with_extension("sha256"), name, cfg, scenario, spec, expect: case.expect })
}

fn check<T: PartialEq + fmt::Debug>(problems: &mut Vec<String>, what: &str, want: Option<T>, got: T) {
    if let Some(w) = want {
        if w != got {
            problems.push(format!("{what}: expected {w:?}, got {got:?}"));
        }
    }
}

fn run_case(case: LoadedCase, bless: bool) -> CaseOutcome {
    let mut problems = Vec::new();
    let report = match run_scenario(&case.cfg, &case.scenario, case.spec) {
        Ok(r) => r,
        Err(e) => {
            return CaseOutcome { name: case.name, problems: vec![e.to_string()], thread_sha256: None, report: None }
        }
    };
    problems.extend(report.failures.iter().cloned());
    let e = &case.expect;
    check(&mut problems, "final model", e.final_model, report.final_model.current);
    check(&mut problems, "final PT state", e.final_pt.map(Some), report.final_pt);
    check(&mut problems, "PT2DT records", e.pt_to_dt, report.pt_to_dt_records);
    check(&mut problems, "DT2PT records", e.dt_to_pt, report.dt_to_pt_records);
    check(&mut problems, "uplink frames", e.uplink_frames, report.uplink_frames);
    check(&mut problems, "gate rejections", e.gate_rejections, report.gate_rejections);
    let hash = report.thread_sha256.clone();
    if e.golden {
        let actual = hash.clone().unwrap_or_default();
        if bless {
            if let Err(err) = std::fs::write(&case.golden, format!("{actual}\n")) {
                problems.push(format!("cannot write {}: {err}", case.golden.display()));
            }
        } else {
            match std::fs::read_to_string(&case.golden) {
                Ok(expected) if expected.trim() == actual => {}
                Ok(expected) => {
                    problems.push(format!("thread hash {actual} differs from golden {}", expected.trim()))
                }
                Err(_) => problems.push(format!("no golden hash at {}; run with --bless", case.golden.display())),
            }
        }
    }
    CaseOutcome { name: case.name, problems, thread_sha256: hash, report: Some(report) }
}

/// Runs every case in `suite` under the lockstep clock, writing thread files
/// to `out`. With `bless`, golden hashes are rewritten instead of compared.
/// Malformed cases abort the suite before anything runs.
pub fn ci_test(suite: &Path, out: &Path, bless: bool) -> Result<SuiteReport, CiError> {
    let suite_err = |message: String| CiError::Suite { path: suite.to_path_buf(), message };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(suite)
        .map_err(|e| suite_err(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml") && p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(suite_err("no case files".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| suite_err(e.to_string()))?;
    let cases = paths.iter().map(|p| load_case(p, out)).collect::<Result<Vec<_>, _>>()?;
    Ok(SuiteReport { cases: cases.into_iter().map(|c| run_case(c, bless)).collect() })
}
