use std::path::PathBuf;

use twinloop::config::{Backing, DtMode, Injection, Isolation, Scenario, TwinConfig};
use twinloop::harness::{run_scenario, RunReport, RunSpec};
use twinloop::model::OperatingState;
use twinloop::sched::ClockMode;

fn scenario() -> Scenario {
    Scenario {
        seed: 9,
        duration_ms: 900,
        inject: vec![
            Injection { at: 0, command: 50 },
            Injection { at: 300, command: 0 },
            Injection { at: 600, command: -1 },
        ],
        ..Scenario::default()
    }
}

fn run(isolation: Isolation, dt: DtMode) -> RunReport {
    let cfg = TwinConfig::default();
    let sc = scenario();
    let mut spec = RunSpec::new(&cfg, &sc);
    spec.backing = Backing::Real;
    spec.dt_mode = dt;
    spec.clock = ClockMode::Wall;
    spec.isolation = isolation;
    spec.dt_exe = Some(PathBuf::from(env!("CARGO_BIN_EXE_twinloop")));
    run_scenario(&cfg, &sc, spec).unwrap()
}

#[test]
fn separate_processes_reach_the_same_outcome() {
    for dt in [DtMode::Shadow, DtMode::Twin] {
        let local = run(Isolation::InProcess, dt);
        let remote = run(Isolation::Processes, dt);
        assert!(local.passed(), "{:?}", local.failures);
        assert!(remote.passed(), "{:?}", remote.failures);
        assert_eq!(local.final_pt, Some(OperatingState::Off));
        assert_eq!(remote.final_pt, local.final_pt);
        assert_eq!(remote.final_model.current, local.final_model.current);
        let statuses = |r: &RunReport| r.trajectory.iter().map(|s| s.current).collect::<Vec<_>>();
        assert_eq!(statuses(&remote), statuses(&local));
        assert_eq!(remote.dt_to_pt_records, 0);
        assert_eq!(remote.operator_commands, 3);
    }
}

#[test]
fn processes_refuse_the_lockstep_clock() {
    let cfg = TwinConfig::default();
    let sc = scenario();
    let mut spec = RunSpec::new(&cfg, &sc);
    spec.isolation = Isolation::Processes;
    spec.dt_exe = Some(PathBuf::from(env!("CARGO_BIN_EXE_twinloop")));
    let err = run_scenario(&cfg, &sc, spec).unwrap_err();
    assert!(err.is_config_error());
}
