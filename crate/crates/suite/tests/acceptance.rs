//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use klb_core::controller::DecisionKind;
use klb_core::dynamics::TrafficVerdict;
use klb_core::explore::ExploreConfig;
use klb_core::ilp::{brute_force_oracle, solve_exact};
use klb_core::scenario::{
    compare_policies, explore_report, ilp_bench, multistep_accuracy, par_map, preset, replay,
    run_scenario, single_dip_fidelity, RunOutput, Scenario, SyntheticDip, PRESETS,
};
use klb_core::sim::{LatencyModel, Policy, ProbeConfig};
use klb_core::types::{sum_weights, MICROS_PER_ONE};
use klb_core::{DipId, Error, Resolution, Weight};
use klb_suite::invariants::{self, ilp_instance};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRng, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
    sub: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail, sub: vec![] }
    }
}

type Check = fn() -> klb_core::Result<Outcome>;

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn must(name: &str) -> Scenario {
    preset(name).unwrap_or_else(|| panic!("preset {name} missing"))
}

// 1: exact solver against exhaustive search on random small instances.
fn ilp_oracle() -> klb_core::Result<Outcome> {
    let mut runner = TestRunner::new_with_rng(
        Config::default(),
        TestRng::deterministic_rng(Config::default().rng_algorithm),
    );
    let strategy = ilp_instance(2..=8, 3..=6, u128::MAX, Some(0.01));
    let started = Instant::now();
    let (mut feasible, mut mismatches, mut bounded) = (0, Vec::new(), 0);
    for i in 0..1000 {
        let inst = strategy
            .new_tree(&mut runner)
            .map_err(|e| Error::State(e.to_string()))?
            .current();
        if inst.theta.is_some() {
            bounded += 1;
        }
        let same = match (solve_exact(&inst), brute_force_oracle(&inst)) {
            (Ok(a), Ok(b)) => {
                feasible += 1;
                a.choice == b.choice && a.objective.to_bits() == b.objective.to_bits()
            }
            (Err(Error::Unsat), Err(Error::Unsat)) => true,
            _ => false,
        };
        if !same {
            mismatches.push(i);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(Outcome::new(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "1000 instances ({feasible} feasible, {bounded} with a cap), {} mismatches, {secs:.1}s",
            mismatches.len()
        ),
    ))
}

// 2: two-step solve against the one-shot fine grid on 100 DIPs.
fn multistep() -> klb_core::Result<Outcome> {
    let seeds: Vec<u64> = (1..=10).collect();
    let rows = multistep_accuracy(100, 10, &seeds, Resolution::new(1e-4)?)?;
    let accurate = rows.iter().filter(|r| r.accuracy >= 0.995).count();
    let faster = rows.iter().filter(|r| r.two_step_ms < r.one_shot_ms).count();
    let worst = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    let one: f64 = rows.iter().map(|r| r.one_shot_ms).sum::<f64>() / rows.len() as f64;
    let two: f64 = rows.iter().map(|r| r.two_step_ms).sum::<f64>() / rows.len() as f64;
    Ok(Outcome::new(
        accurate >= 9 && faster == rows.len(),
        format!(
            "accuracy >= 99.5% on {accurate}/10 seeds (worst {:.4}%), two-step faster on {faster}/10, \
             mean {two:.1} ms vs {one:.1} ms",
            100.0 * worst
        ),
    ))
}

// 3: exact solve time at 100 and 500 DIPs with 10 weights each.
fn ilp_runtime() -> klb_core::Result<Outcome> {
    let rows = ilp_bench(&[100, 500], 10, 1, 1)?;
    let limit = |n: usize| if n <= 100 { 5_000.0 } else { 60_000.0 };
    let pass = rows.iter().all(|r| r.wall_ms < limit(r.dips));
    let detail = rows
        .iter()
        .map(|r| format!("{} DIPs {:.1} ms", r.dips, r.wall_ms))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome::new(pass, detail))
}

// 4: exploration budget on pool30.
fn exploration_budget() -> klb_core::Result<Outcome> {
    let run = run_scenario(&must("pool30"))?;
    let stats = run
        .summary
        .exploration
        .clone()
        .ok_or_else(|| Error::State("no exploration stats".into()))?;
    let explored: BTreeSet<DipId> = run
        .decisions
        .iter()
        .filter_map(|d| match d.kind {
            DecisionKind::Explored { dip, .. } => Some(dip),
            _ => None,
        })
        .collect();
    let n = run.scenario.dip_count() as usize;
    let per_iter = stats.rounds as f64 / stats.max_iterations.max(1) as f64;
    let finished = stats.finished_at.unwrap_or(f64::INFINITY);
    let pass = explored.len() == n
        && stats.iterations.values().all(|&i| i <= 15)
        && per_iter <= 3.0
        && finished <= 300.0;
    Ok(Outcome::new(
        pass,
        format!(
            "{}/{n} DIPs explored, max {} iterations, {} rounds ({per_iter:.2} per iteration), done at {finished} s",
            explored.len(),
            stats.max_iterations,
            stats.rounds
        ),
    ))
}

// 5: fit fidelity on the quadratic and M/M/1 probe models.
fn curve_fit() -> klb_core::Result<Outcome> {
    let ks = [2.0, 5.0, 10.0, 20.0, 40.0];
    let start = Resolution::DEFAULT.quantize(1.0 / 30.0)?;
    let cfg = ExploreConfig::default();
    let mut quad_err: f64 = 0.0;
    let mut quad_samples = 0;
    let mut mm1_err: f64 = 0.0;
    let mut sub = Vec::new();
    for k in ks {
        let clean = ProbeConfig { noise_frac: 0.0, ..ProbeConfig::default() };
        let mut dip = SyntheticDip::new(LatencyModel::Quadratic { q1: 1.0, q2: 4.0 }, k, clean, 1);
        let r = single_dip_fidelity(&mut dip, start, &cfg, 5)?;
        quad_err = quad_err.max(r.coeff_rel_err.unwrap_or(f64::INFINITY));
        quad_samples = quad_samples.max(r.fit_samples);
        let mut dip = SyntheticDip::new(LatencyModel::Mm1, k, ProbeConfig::default(), 1);
        let r = single_dip_fidelity(&mut dip, start, &cfg, usize::MAX)?;
        mm1_err = mm1_err.max(r.predict_rel_err);
        sub.push(format!("k={k}: M/M/1 prediction error {:.1}%", 100.0 * r.predict_rel_err));
    }
    let run = run_scenario(&must("pool30"))?;
    let pool = explore_report(&run)?
        .iter()
        .map(|r| r.predict_rel_err.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    sub.push(format!("pool30 worst per-DIP prediction error {:.1}%", 100.0 * pool));
    let pass = quad_err <= 1e-6 && quad_samples <= 5 && mm1_err <= 0.15 && pool <= 0.15;
    Ok(Outcome {
        pass,
        detail: format!(
            "quadratic coefficient error {quad_err:.1e} from {quad_samples} samples, \
             M/M/1 worst prediction error {:.1}% (single DIP) {:.1}% (pool30)",
            100.0 * mm1_err,
            100.0 * pool
        ),
        sub,
    })
}

// 6: KLB against round robin and least connections on pool30.
fn policy_comparison() -> klb_core::Result<Outcome> {
    let runs = compare_policies(&must("pool30"), &[Policy::Rr, Policy::Lc, Policy::Klb], 3)?;
    let (rr, lc, klb) = (&runs[0].summary, &runs[1].summary, &runs[2].summary);
    let pass = klb.mean_latency_ms <= 0.8 * rr.mean_latency_ms
        && klb.mean_latency_ms <= 0.92 * lc.mean_latency_ms
        && klb.util_spread < 0.5 * rr.util_spread;
    Ok(Outcome::new(
        pass,
        format!(
            "mean latency rr {:.1} lc {:.1} klb {:.1} ms, class spread rr {:.3} klb {:.3}",
            rr.mean_latency_ms, lc.mean_latency_ms, klb.mean_latency_ms, rr.util_spread, klb.util_spread
        ),
    ))
}

// 7: three unequal DIPs.
fn noisy_pool() -> klb_core::Result<Outcome> {
    let runs = compare_policies(&must("pool3-noisy"), &[Policy::Rr, Policy::Klb], 2)?;
    let (rr, klb) = (&runs[0].summary.class_util, &runs[1].summary.class_util);
    let gap = rr["0.6x"] - rr["1x"];
    let hi = klb.values().cloned().fold(f64::MIN, f64::max);
    let lo = klb.values().cloned().fold(f64::MAX, f64::min);
    let fmt = |m: &BTreeMap<String, f64>| {
        ["1x", "0.8x", "0.6x"].iter().map(|c| format!("{:.3}", m[*c])).collect::<Vec<_>>().join("/")
    };
    Ok(Outcome::new(
        gap >= 0.25 && hi - lo <= 0.10,
        format!(
            "rr utilization {} (gap {:.3}), klb utilization {} (band {:.3})",
            fmt(rr),
            gap,
            fmt(klb),
            hi - lo
        ),
    ))
}

/// Mean per-DIP weight before and after, per class, ordered by capacity.
struct ClassShift {
    class: String,
    before: f64,
    after: f64,
}

impl ClassShift {
    fn delta(&self) -> f64 {
        self.after - self.before
    }
}

fn class_shift(
    run: &RunOutput,
    before: &BTreeMap<DipId, Weight>,
    after: &BTreeMap<DipId, Weight>,
    skip: &BTreeSet<DipId>,
) -> Vec<ClassShift> {
    let mut acc: BTreeMap<String, (f64, f64, f64, u32)> = BTreeMap::new();
    for spec in run.scenario.dips() {
        if skip.contains(&spec.id) {
            continue;
        }
        let e = acc.entry(spec.class.clone()).or_default();
        e.0 += spec.capacity;
        e.1 += before.get(&spec.id).map_or(0.0, |w| w.value());
        e.2 += after.get(&spec.id).map_or(0.0, |w| w.value());
        e.3 += 1;
    }
    let mut out: Vec<(f64, ClassShift)> = acc
        .into_iter()
        .map(|(class, (cap, b, a, n))| {
            let n = n as f64;
            (cap / n, ClassShift { class, before: b / n, after: a / n })
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.into_iter().map(|(_, s)| s).collect()
}

fn program_at_or_before(run: &RunOutput, t: f64) -> klb_core::Result<BTreeMap<DipId, Weight>> {
    run.programs
        .iter()
        .rev()
        .find(|(at, _)| *at <= t)
        .map(|(_, w)| w.clone())
        .ok_or_else(|| Error::State(format!("no program by t={t}")))
}

fn final_program(run: &RunOutput) -> klb_core::Result<BTreeMap<DipId, Weight>> {
    run.programs
        .last()
        .map(|(_, w)| w.clone())
        .ok_or_else(|| Error::State("no program".into()))
}

fn event_time(run: &RunOutput) -> f64 {
    run.scenario.events.first().map_or(f64::INFINITY, |e| e.at)
}

/// Overloads after `from`: store samples flagged dropped, and windows at or
/// above the probe model's drop utilization, among `dips`.
fn drops_after(run: &RunOutput, from: f64, dips: &BTreeSet<DipId>) -> (usize, usize, f64) {
    let flagged = run
        .store
        .vips()
        .flat_map(|v| run.store.entries(v))
        .filter(|e| e.time > from && e.dropped && dips.contains(&e.dip))
        .count();
    let limit = run.scenario.probe.drop_util;
    let windows: Vec<f64> = run
        .ticks
        .iter()
        .filter(|t| t.time > from)
        .flat_map(|t| t.windows.iter())
        .filter(|w| dips.contains(&w.dip))
        .map(|w| w.utilization)
        .collect();
    let hot = windows.iter().filter(|&&u| u >= limit).count();
    (flagged, hot, windows.iter().cloned().fold(0.0, f64::max))
}

fn shift_line(shifts: &[ClassShift]) -> String {
    shifts
        .iter()
        .map(|s| format!("{} {:+.4}", s.class, s.delta()))
        .collect::<Vec<_>>()
        .join(", ")
}

// 8: two 8u DIPs fail at 150 s.
fn failure() -> klb_core::Result<Outcome> {
    let run = run_scenario(&must("failure"))?;
    let at = event_time(&run);
    let failed: BTreeSet<DipId> = run.scenario.events[0].dips.iter().map(|&d| DipId(d - 1)).collect();
    let detected = run
        .decisions
        .iter()
        .filter(|d| matches!(d.kind, DecisionKind::Failure { .. }))
        .map(|d| d.time)
        .fold(f64::NAN, f64::max);
    let reprogram = run
        .programs
        .iter()
        .find(|(t, _)| *t >= detected)
        .map(|(t, _)| *t)
        .unwrap_or(f64::INFINITY);
    let after = final_program(&run)?;
    let shifts = class_shift(&run, &program_at_or_before(&run, at)?, &after, &failed);
    let monotone = shifts.windows(2).all(|p| p[0].delta() <= p[1].delta());
    let sums = run.programs.iter().all(|(_, w)| sum_weights(w.values()) == u64::from(MICROS_PER_ONE));
    let zeroed = failed.iter().all(|d| after.get(d).is_some_and(|w| w.is_zero()));
    let survivors: BTreeSet<DipId> = run.scenario.dips().iter().map(|s| s.id).filter(|d| !failed.contains(d)).collect();
    let drain = run.scenario.controller.initial_drain;
    let (flagged, hot, peak) = drops_after(&run, reprogram + drain, &survivors);
    Ok(Outcome::new(
        monotone && sums && zeroed && flagged == 0 && hot == 0,
        format!(
            "failure seen at {detected} s, reprogrammed at {reprogram} s; increments {}; \
             sums exact {sums}; failed zeroed {zeroed}; {flagged} dropped samples, {hot} windows over the \
             drop line (peak {peak:.3})",
            shift_line(&shifts)
        ),
    ))
}

// 9: offered traffic rises 10% at 150 s.
fn traffic() -> klb_core::Result<Outcome> {
    let run = run_scenario(&must("traffic-change"))?;
    let at = event_time(&run);
    let period = run.scenario.controller.probe_period;
    let verdict = run
        .decisions
        .iter()
        .find(|d| d.time > at && matches!(d.kind, DecisionKind::Traffic { verdict: TrafficVerdict::Increase, .. }))
        .map(|d| d.time);
    let within = verdict.is_some_and(|t| t <= at + 2.0 * period);
    let resolved = verdict.is_some_and(|t| {
        run.decisions.iter().any(|d| d.time >= t && matches!(d.kind, DecisionKind::Solve { .. }))
            && run.programs.iter().any(|(p, _)| *p >= t)
    });
    let shifts = class_shift(&run, &program_at_or_before(&run, at)?, &final_program(&run)?, &BTreeSet::new());
    let top = shifts.last().map_or(f64::NAN, ClassShift::delta);
    let largest = shifts.iter().all(|s| s.delta() <= top);
    let all: BTreeSet<DipId> = run.scenario.dips().iter().map(|s| s.id).collect();
    let (flagged, hot, peak) = drops_after(&run, at, &all);
    Ok(Outcome::new(
        within && resolved && largest && flagged == 0 && hot == 0,
        format!(
            "increase seen at {}; re-solved {resolved}; per-DIP weight change {}; {flagged} dropped samples, \
             {hot} windows over the drop line (peak {peak:.3})",
            verdict.map_or("never".into(), |t| format!("{t} s")),
            shift_line(&shifts)
        ),
    ))
}

// 10: the 4u class loses a quarter of its capacity at 150 s.
fn capacity() -> klb_core::Result<Outcome> {
    let run = run_scenario(&must("capacity-change"))?;
    let at = event_time(&run);
    let c = &run.scenario.controller;
    let deadline = at + 2.0 * c.probe_period + c.initial_drain;
    let class = run.scenario.events[0].class.clone().unwrap_or_default();
    let affected: BTreeSet<DipId> = run.scenario.dips().iter().filter(|s| s.class == class).map(|s| s.id).collect();
    let mut first: BTreeMap<DipId, f64> = BTreeMap::new();
    for d in &run.decisions {
        if let DecisionKind::Capacity { dip, .. } = d.kind {
            if d.time > at {
                first.entry(dip).or_insert(d.time);
            }
        }
    }
    let detected = affected.iter().filter(|d| first.get(d).is_some_and(|&t| t <= deadline)).count();
    let before = program_at_or_before(&run, at)?;
    let after = final_program(&run)?;
    let decreased = affected.iter().filter(|d| after[d] < before[d]).count();
    let b: f64 = affected.iter().map(|d| before[d].value()).sum();
    let a: f64 = affected.iter().map(|d| after[d].value()).sum();
    let cut = (b - a) / b;
    Ok(Outcome::new(
        detected == affected.len() && decreased == affected.len() && cut > 0.05 && cut < 0.25,
        format!(
            "{detected}/{} {class} DIPs flagged by {deadline} s, {decreased} lowered, class weight cut {:.1}%",
            affected.len(),
            100.0 * cut
        ),
    ))
}

fn csvs(run: &RunOutput) -> Vec<String> {
    vec![
        run.metrics_csv(),
        run.weights_csv(),
        run.store.to_csv(),
        run.decisions_csv(),
        run.summary_csv(),
        run.histogram_csv(),
        run.explore_csv(),
        format!("{:016x}", run.digest),
    ]
}

// 11: every preset reruns byte for byte and replays from its store log.
fn determinism() -> klb_core::Result<Outcome> {
    let names: Vec<&str> = PRESETS.iter().flat_map(|n| [*n, *n]).collect();
    let runs = par_map(&names, jobs(), |n| run_scenario(&must(n)));
    let mut sub = Vec::new();
    let mut pass = true;
    for (pair, name) in runs.chunks(2).zip(PRESETS) {
        let (a, b) = match (&pair[0], &pair[1]) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Err(e.clone()),
        };
        let same = csvs(a) == csvs(b);
        let cfg = Scenario::from_toml(&a.scenario.to_toml()?)?.controller;
        let replayed = match replay(&cfg, &a.store.to_csv(), &a.decisions_csv()) {
            Ok(r) if !r.truncated && r.decisions == a.decisions.len() => format!("{} decisions replayed", r.decisions),
            Ok(r) => {
                pass = false;
                format!("replay covered {} of {} decisions", r.decisions, a.decisions.len())
            }
            Err(e) => {
                pass = false;
                format!("replay failed: {e}")
            }
        };
        pass &= same;
        sub.push(format!("{name}: identical rerun {same}, {replayed}"));
    }
    Ok(Outcome { pass, detail: format!("{} presets run twice", PRESETS.len()), sub })
}

// 12: the property suites.
fn property_suites() -> klb_core::Result<Outcome> {
    let all = invariants::all();
    let results = par_map(&all, jobs(), |inv| {
        let t = Instant::now();
        ((inv.check)(), t.elapsed().as_secs_f64())
    });
    let mut sub = Vec::new();
    let mut failed = 0;
    for (inv, (r, secs)) in all.iter().zip(results) {
        let verdict = if r.is_ok() { "PASS" } else { "FAIL" };
        let mut line = format!("{verdict} {}::{} ({secs:.1}s)", inv.module, inv.name);
        if let Err(e) = r {
            failed += 1;
            line.push_str(&format!(": {}", e.lines().next().unwrap_or("")));
        }
        sub.push(line);
    }
    Ok(Outcome {
        pass: failed == 0,
        detail: format!(
            "{} of {} invariants hold at {} cases each",
            all.len() - failed,
            all.len(),
            invariants::CASES
        ),
        sub,
    })
}

fn main() {
    let criteria: [(&str, Check); 12] = [
        ("ilp oracle equivalence", ilp_oracle),
        ("multi-step accuracy", multistep),
        ("ilp runtime scaling", ilp_runtime),
        ("exploration budget", exploration_budget),
        ("curve-fit fidelity", curve_fit),
        ("policy comparison", policy_comparison),
        ("3-DIP noisy pool", noisy_pool),
        ("failure redistribution", failure),
        ("traffic +10%", traffic),
        ("capacity change", capacity),
        ("determinism and replay", determinism),
        ("invariant suites", property_suites),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {verdict} {name}: {} [{:.1}s]",
            i + 1,
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        for s in &outcome.sub {
            println!("    {s}");
        }
        if !outcome.pass {
            failures += 1;
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
