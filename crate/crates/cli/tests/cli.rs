use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn klb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klb")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_into(dir: &Path, preset: &str, duration: &str) {
    let o = klb(&["run", preset, "--duration", duration, "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("scenario,policy,seed"));
}

#[test]
fn presets_list_and_print() {
    let o = klb(&["presets"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(names.len(), 6);
    assert!(names.iter().any(|n| n == "pool30"));
    let o = klb(&["presets", "failure"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[[dip_class]]"));
}

#[test]
fn usage_errors_exit_nonzero() {
    assert_eq!(klb(&["presets", "nope"]).status.code(), Some(2));
    assert_eq!(klb(&["run", "no-such-scenario"]).status.code(), Some(2));
    assert_eq!(klb(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn run_replay_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), "failure", "200");
    let p = dir.path().to_str().unwrap();
    let o = klb(&["replay", p]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("replayed 41 ticks"), "{}", stdout(&o));
    let o = klb(&["verify", p]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "summary matches");
}

#[test]
fn replay_reports_divergence_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    run_into(dir.path(), "pool30", "60");
    let path = dir.path().join("decisions.csv");
    let text = fs::read_to_string(&path).unwrap();
    let tampered = text.replacen(",0,baseline,dip=2;l0=", ",0,baseline,dip=2;l0=1", 1);
    assert_ne!(tampered, text);
    fs::write(&path, tampered).unwrap();
    let o = klb(&["replay", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("t=0"), "{}", stdout(&o));
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_into(a.path(), "pool3-noisy", "120");
    run_into(b.path(), "pool3-noisy", "120");
    for f in ["metrics.csv", "weights.csv", "store.csv", "decisions.csv", "summary.csv", "latency_hist.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn solver_benchmarks_emit_csv() {
    let o = klb(&["ilp-bench", "--dips", "10,20", "--repeats", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("dips,points,wall_ms,objective"));
    assert_eq!(out.lines().count(), 3);
    let o = klb(&["multistep-accuracy", "--seeds", "2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}
