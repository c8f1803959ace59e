use std::fs;

use klb_core::scenario::{preset, replay_dir, run_scenario, verify_dir, Scenario, PRESETS};
use klb_core::sim::Policy;

fn short(name: &str, duration: f64) -> Scenario {
    let mut sc = preset(name).unwrap();
    sc.duration = duration;
    sc.warmup = sc.warmup.min(duration / 2.0);
    sc.events.retain(|e| e.at <= duration);
    sc
}

#[test]
fn presets_round_trip_through_toml() {
    for name in PRESETS {
        let sc = preset(name).unwrap();
        let back = Scenario::from_toml(&sc.to_toml().unwrap()).unwrap();
        assert_eq!(back, sc, "{name}");
    }
}

#[test]
fn bad_toml_is_a_config_error() {
    let mut sc = preset("failure").unwrap();
    sc.events[0].dips = vec![31];
    let text = sc.to_toml().unwrap();
    assert!(matches!(Scenario::from_toml(&text), Err(klb_core::Error::Config(_))));
    assert!(Scenario::from_toml("name = 3").is_err());
}

#[test]
fn same_seed_same_bytes_other_seed_other_bytes() {
    let sc = short("pool30", 120.0);
    let a = run_scenario(&sc).unwrap();
    let b = run_scenario(&sc).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.store.to_csv(), b.store.to_csv());
    assert_eq!(a.decisions_csv(), b.decisions_csv());
    assert_eq!(a.weights_csv(), b.weights_csv());
    assert_eq!(a.digest, b.digest);
    let mut other = sc.clone();
    other.seed = 2;
    let c = run_scenario(&other).unwrap();
    assert_ne!(a.metrics_csv(), c.metrics_csv());
}

#[test]
fn written_runs_replay_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&short("failure", 200.0)).unwrap();
    assert!(run.violations().is_empty(), "{:?}", run.violations());
    run.write(dir.path()).unwrap();
    for f in ["metrics.csv", "weights.csv", "store.csv", "decisions.csv", "summary.csv", "summary.json", "scenario.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let r = replay_dir(dir.path()).unwrap();
    assert_eq!(r.decisions, run.decisions.len());
    assert!(verify_dir(dir.path()).unwrap().is_empty());

    // A doctored summary shows up as a mismatch.
    let p = dir.path().join("summary.csv");
    let text = fs::read_to_string(&p).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut f: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    f[6] = "1.0".into();
    lines[1] = f.join(",");
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    let bad = verify_dir(dir.path()).unwrap();
    assert!(bad.iter().any(|m| m.field == "mean_ms"), "{bad:?}");
}

#[test]
fn baselines_program_nothing_but_still_run() {
    for p in [Policy::Rr, Policy::Lc, Policy::Random] {
        let mut sc = short("pool3-noisy", 60.0);
        sc.policy = p;
        let run = run_scenario(&sc).unwrap();
        assert!(run.decisions.is_empty());
        assert!(run.programs.is_empty());
        assert!(run.summary.completed > 0);
    }
}

#[test]
fn failed_dips_carry_no_traffic_after_detection() {
    let run = run_scenario(&short("failure", 200.0)).unwrap();
    let last = &run.programs.last().unwrap().1;
    for d in [24, 25] {
        assert!(last[&klb_core::DipId(d)].is_zero());
    }
    for t in run.ticks.iter().filter(|t| t.time > 170.0) {
        for w in t.windows.iter().filter(|w| w.dip.0 >= 24 && w.dip.0 <= 25) {
            assert_eq!(w.completed, 0, "t={} {:?}", t.time, w.dip);
        }
    }
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in PRESETS {
        let sc = Scenario::load(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(sc, preset(name).unwrap(), "{name}");
    }
}
