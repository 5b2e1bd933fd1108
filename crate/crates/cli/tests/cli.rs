use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn dire_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dire-sim")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run_ps(out: &Path, seed: &str) -> Output {
    let config = scenario("ps_week.toml");
    dire_sim(&["run", "--config", config.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()])
}

#[test]
fn run_then_check_passes() {
    let dir = scratch("cli-run-check");
    let run = run_ps(&dir, "3");
    assert!(run.status.success(), "{run:?}");
    assert!(stdout(&run).contains("seed: 3"));
    assert!(dir.join("formulas.csv").exists());
    let check = dire_sim(&["check", "--report", dir.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(0));
    assert!(stdout(&check).starts_with("PASS ps-fed promotion"));
}

#[test]
fn check_fails_on_a_tampered_report() {
    let dir = scratch("cli-tampered");
    assert!(run_ps(&dir, "1").status.success());
    let path = dir.join("federations.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains(",280,"));
    std::fs::write(&path, text.replace(",280,", ",281,")).unwrap();
    let check = dire_sim(&["check", "--report", dir.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(1));
    assert!(stdout(&check).starts_with("FAIL"));
}

#[test]
fn missing_inputs_are_errors() {
    let check = dire_sim(&["check", "--report", "/nonexistent/report"]);
    assert_eq!(check.status.code(), Some(2));
    let run = dire_sim(&["run", "--config", "/nonexistent.toml"]);
    assert_eq!(run.status.code(), Some(2));
    let config = scenario("ps_week.toml");
    let stats = dire_sim(&["workload-stats", "--config", config.to_str().unwrap()]);
    assert_eq!(stats.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&stats.stderr).contains("no [workload] table"));
}

#[test]
fn workload_stats_reports_both_rates() {
    let config = scenario("tree_workload.toml");
    let out = dire_sim(&["workload-stats", "--config", config.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("expected match rate: 0.007500"));
    assert!(text.contains("sampled match rate:"));
}
