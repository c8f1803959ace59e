use klb_core::controller::LatencyStore;
use klb_core::scenario::{preset, replay, run_scenario, RunOutput};
use klb_core::Error;

fn short_failure_run() -> RunOutput {
    let mut sc = preset("failure").unwrap();
    sc.duration = 200.0;
    sc.warmup = 100.0;
    run_scenario(&sc).unwrap()
}

/// Rewrites one field of the first store line at `time` for `dip`.
fn tamper_store(csv: &str, time: &str, dip: &str, field: usize, value: &str) -> String {
    let mut done = false;
    csv.lines()
        .map(|l| {
            let mut f: Vec<String> = l.split(',').map(str::to_string).collect();
            if !done && f.len() == 7 && f[6] == time && f[1] == dip {
                f[field] = value.to_string();
                done = true;
            }
            f.join(",") + "\n"
        })
        .collect()
}

fn divergence_time(r: klb_core::Result<klb_core::scenario::ReplayReport>) -> f64 {
    match r {
        Err(Error::ReplayDivergence { time, .. }) => time,
        other => panic!("expected a divergence, got {other:?}"),
    }
}

#[test]
fn untouched_logs_replay_every_decision() {
    let run = short_failure_run();
    let r = replay(&run.scenario.controller, &run.store.to_csv(), &run.decisions_csv()).unwrap();
    assert!(!r.truncated);
    assert_eq!(r.decisions, run.decisions.len());
    assert_eq!(r.last_tick, Some(200.0));
    assert_eq!(r.ticks, 41);
}

#[test]
fn tampered_weight_diverges_at_its_tick() {
    let run = short_failure_run();
    let store = tamper_store(&run.store.to_csv(), "120", "3", 2, "0.5");
    let t = divergence_time(replay(&run.scenario.controller, &store, &run.decisions_csv()));
    assert_eq!(t, 120.0);
}

#[test]
fn tampered_decision_diverges_at_its_tick() {
    let run = short_failure_run();
    let decisions: String = run
        .decisions_csv()
        .lines()
        .map(|l| {
            if l.starts_with("0,0,baseline,dip=4;") {
                "0,0,baseline,dip=4;l0=1\n".to_string()
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let t = divergence_time(replay(&run.scenario.controller, &run.store.to_csv(), &decisions));
    assert_eq!(t, 0.0);
}

#[test]
fn tampered_latency_diverges_where_a_decision_reads_it() {
    let run = short_failure_run();
    // The zero-weight reading at t=0 is DIP 4's logged baseline.
    let store = tamper_store(&run.store.to_csv(), "0", "4", 3, "900");
    let t = divergence_time(replay(&run.scenario.controller, &store, &run.decisions_csv()));
    assert_eq!(t, 0.0);
}

#[test]
fn log_cut_mid_line_replays_up_to_the_last_whole_tick() {
    let run = short_failure_run();
    let full = run.store.to_csv();
    // Cut inside DIP 7's line of the 21st tick.
    let at = full.match_indices("\n0,7,").map(|(i, _)| i).nth(20).unwrap() + 4;
    let cut = &full[..at];
    let r = replay(&run.scenario.controller, cut, &run.decisions_csv()).unwrap();
    assert!(r.truncated);
    let last = r.last_tick.unwrap();
    assert!(last < 200.0);
    let replayed = run.decisions.iter().filter(|d| d.time <= last).count();
    assert_eq!(r.decisions, replayed);
}

#[test]
fn log_cut_at_a_tick_boundary_is_reported_as_truncated() {
    let run = short_failure_run();
    // Drop every tick from the failure on; the decision log still has them.
    let store: String = run
        .store
        .to_csv()
        .lines()
        .filter(|l| l.rsplit(',').next().and_then(|t| t.parse::<f64>().ok()).is_none_or(|t| t < 150.0))
        .map(|l| format!("{l}\n"))
        .collect();
    let r = replay(&run.scenario.controller, &store, &run.decisions_csv()).unwrap();
    assert!(r.truncated);
    assert_eq!(r.last_tick, Some(145.0));
    assert!(run.decisions.iter().any(|d| d.time > 145.0));
}

#[test]
fn store_refuses_out_of_order_records() {
    let run = short_failure_run();
    let csv = run.store.to_csv();
    let mut lines: Vec<&str> = csv.lines().collect();
    // Swap the first record for DIP 0 with its next one.
    let first = lines.iter().position(|l| l.starts_with("0,0,")).unwrap();
    let second = first + 1 + lines[first + 1..].iter().position(|l| l.starts_with("0,0,")).unwrap();
    lines.swap(first, second);
    let text = lines.join("\n") + "\n";
    assert!(matches!(LatencyStore::from_csv(&text), Err(Error::Invariant(_))));
    assert_eq!(LatencyStore::from_csv(&run.store.to_csv()).unwrap(), run.store);
}
