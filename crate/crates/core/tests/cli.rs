use std::path::Path;
use std::process::{Command, Output};

fn simvar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simvar")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simvar(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&simvar(dir.path(), &["run"])), 1);
    assert_eq!(code(&simvar(dir.path(), &["run", "--scenario", "test1", "--n", "1"])), 1);
    assert_eq!(code(&simvar(dir.path(), &["run", "--scenario", "test1", "--load", "120"])), 1);
    assert_eq!(code(&simvar(dir.path(), &["run", "--scenario", "nope"])), 1);
    assert_eq!(code(&simvar(dir.path(), &["--help"])), 0);
    assert_eq!(code(&simvar(dir.path(), &["--version"])), 0);
}

#[test]
fn pedestrian_scenario_is_permissible() {
    let dir = tempfile::tempdir().unwrap();
    let o = simvar(dir.path(), &["run", "--scenario", "test6", "--n", "100", "--tolerance", "0.01", "--gate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("verdict=permissible"));
    assert!(out.contains("max_deviation_m=0\n"));
    assert!(dir.path().join("campaigns/test6-load0-nice0/runs/99.trace").exists());
    assert!(dir.path().join("campaigns/test6-load0-nice0/analysis/series_all.csv").exists());
}

#[test]
fn analyze_and_report_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let scn = p.join("t2.scn");
    let mut spec = simvar::minisim::catalog::scenario_by_id("test2").unwrap();
    spec.injectors.collision_impulse_jitter = 1e-2;
    simvar::minisim::scenario_file::write(&spec, &scn).unwrap();
    let o = simvar(p, &["run", "--scenario", scn.to_str().unwrap(), "--n", "20", "--entropy", "4", "--campaign", "jit"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let a1 = simvar(p, &["analyze", "--campaign", "jit"]);
    let csv1 = std::fs::read(p.join("campaigns/jit/analysis/series_all.csv")).unwrap();
    let a2 = simvar(p, &["analyze", "--campaign", "jit"]);
    let csv2 = std::fs::read(p.join("campaigns/jit/analysis/series_all.csv")).unwrap();
    assert_eq!(a1.stdout, a2.stdout);
    assert_eq!(csv1, csv2);
    assert!(stdout(&a1).contains("verdict=non_permissible"));

    let r1 = simvar(p, &["report"]);
    let r2 = simvar(p, &["report"]);
    assert_eq!(code(&r1), 0);
    assert_eq!(r1.stdout, r2.stdout);
    assert_eq!(std::fs::read(p.join("report.txt")).unwrap(), r2.stdout);
    // The restricted column drops the post-collision window, so the gate passes.
    assert_eq!(code(&simvar(p, &["report", "--gate"])), 0);
    assert_eq!(code(&simvar(p, &["report", "--gate", "--tolerance", "0.0000001"])), 0);
}

#[test]
fn report_gate_fails_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let scn = p.join("drop.scn");
    let mut spec = simvar::minisim::catalog::scenario_by_id("test1").unwrap();
    spec.injectors.rare_substep_drop = Some(simvar::minisim::RareSubstepDrop { probability: 0.5, at_time: 1.0 });
    simvar::minisim::scenario_file::write(&spec, &scn).unwrap();
    let o = simvar(p, &["run", "--scenario", scn.to_str().unwrap(), "--n", "10", "--entropy", "1", "--gate"]);
    assert_eq!(code(&o), 2);
    let r = simvar(p, &["report", "--gate"]);
    assert_eq!(code(&r), 2);
    assert!(stdout(&r).contains("gate=fail"));
}

#[test]
fn adapter_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = simvar(dir.path(), &["run", "--scenario", "test1", "--n", "5", "--adapter", "exit 1"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("aborted"));
}

#[test]
fn sweep_and_escalate_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = simvar(p, &["sweep", "--scenario", "test5", "--n", "3", "--factor", "priority", "--levels", "-5,0,5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("domain_boundary=5"));
    let csv = std::fs::read_to_string(p.join("sweeps/test5-prio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("level,scenario_id,max_deviation_m,verdict,tolerance_m\n-5,test5,0,permissible,0.01"));

    let o = simvar(p, &["sweep", "--scenario", "test5", "--n", "3", "--levels", "50,25"]);
    assert_eq!(code(&o), 1);

    let o = simvar(p, &["escalate", "--scenario", "test6", "--max-n", "100"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("stage n=10 "));
    assert!(out.contains("n_final=100"));
    assert_eq!(code(&simvar(p, &["escalate", "--scenario", "test6", "--max-n", "5", "--campaign", "x"])), 1);
}
