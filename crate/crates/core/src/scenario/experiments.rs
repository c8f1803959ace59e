use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::controller::DecisionKind;
use crate::error::{Error, Result};
use crate::explore::{effective_drop, fit_curve, next_weight, predict_latency_f, ExploreConfig,
    ExplorationState};
use crate::ilp::{build_instance, solve_exact, solve_multistep, GridSpec, MultistepConfig};
use crate::scenario::{run_scenario, RunOutput, Scenario};
use crate::sim::{LatencyModel, Policy, ProbeConfig};
use crate::types::{DipId, LatencySample, Resolution, Weight, WeightLatencyCurve};

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}

pub const COMPARE_POLICIES: [Policy; 7] = [
    Policy::Rr,
    Policy::Lc,
    Policy::Wrr,
    Policy::Wlc,
    Policy::Random,
    Policy::P2,
    Policy::Klb,
];

/// One run per policy over the same scenario and seed.
pub fn compare_policies(base: &Scenario, policies: &[Policy], jobs: usize) -> Result<Vec<RunOutput>> {
    let scs: Vec<Scenario> = policies
        .iter()
        .map(|&p| {
            let mut s = base.clone();
            s.policy = p;
            s
        })
        .collect();
    par_map(&scs, jobs, run_scenario).into_iter().collect()
}

pub fn compare_csv(runs: &[RunOutput]) -> String {
    let mut classes: Vec<String> = Vec::new();
    for r in runs {
        for k in r.summary.class_util.keys() {
            if !classes.contains(k) {
                classes.push(k.clone());
            }
        }
    }
    let mut s = String::from("policy,mean_ms,p50_ms,p95_ms,p99_ms,completed,aborted,rejected,util_spread");
    for c in &classes {
        let _ = write!(s, ",util_{c}");
    }
    s.push('\n');
    for r in runs {
        let m = &r.summary;
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6}",
            m.policy, m.mean_latency_ms, m.p50_ms, m.p95_ms, m.p99_ms, m.completed, m.aborted,
            m.rejected, m.util_spread
        );
        for c in &classes {
            let _ = write!(s, ",{:.6}", m.class_util.get(c).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

// ---- curve exploration -------------------------------------------------

/// A lone DIP whose utilization is `k * w`, probed through a latency model.
#[derive(Clone, Debug)]
pub struct SyntheticDip {
    pub model: LatencyModel,
    pub base_ms: f64,
    pub service_ms: f64,
    pub servers: f64,
    /// Utilization per unit of weight.
    pub k: f64,
    pub probe: ProbeConfig,
    rng: ChaCha8Rng,
}

impl SyntheticDip {
    pub fn new(model: LatencyModel, k: f64, probe: ProbeConfig, seed: u64) -> Self {
        SyntheticDip {
            model,
            base_ms: 0.0,
            service_ms: 40.0,
            servers: 1.0,
            k,
            probe,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn truth(&self, w: f64) -> f64 {
        self.model.latency(self.base_ms, self.service_ms, self.k * w, self.servers)
    }

    /// Noisy mean latency and the explicit drop flag at weight `w`.
    pub fn probe(&mut self, w: f64) -> (f64, bool) {
        let mean = self.truth(w);
        let n = self.probe.n_requests.max(1);
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            acc += mean * (1.0 + self.probe.noise_frac * z);
        }
        ((acc / n as f64).max(1e-6), self.k * w >= self.probe.drop_util)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FidelityReport {
    pub model: String,
    pub iterations: u32,
    pub w_max: f64,
    /// Drop-free samples, the zero-weight reading included.
    pub samples: usize,
    /// How many of them went into the fit.
    pub fit_samples: usize,
    pub coeffs: [f64; 3],
    /// Coefficients of the truth in weight units, when it is a quadratic.
    pub truth_coeffs: Option<[f64; 3]>,
    /// Largest relative coefficient error against `truth_coeffs`.
    pub coeff_rel_err: Option<f64>,
    /// Largest relative prediction error over w <= 0.9 w_max.
    pub predict_rel_err: f64,
}

/// Runs the exploration loop on one synthetic DIP and fits its curve from at
/// most `max_fit` drop-free samples (earliest first).
pub fn single_dip_fidelity(
    dip: &mut SyntheticDip,
    w_start: Weight,
    cfg: &ExploreConfig,
    max_fit: usize,
) -> Result<FidelityReport> {
    let id = DipId(0);
    let res = cfg.resolution;
    let (l0, _) = dip.probe(0.0);
    let mut samples = vec![LatencySample::new(id, Weight::ZERO, l0, false, 0.0, 1)?];
    let mut st = ExplorationState::new(id, l0, w_start, cfg)?;
    let mut t = 0.0;
    loop {
        t += 1.0;
        let w = st.w_now;
        let (l, explicit) = dip.probe(w.value());
        let dropped = effective_drop(l0, l, explicit, cfg.drop_factor);
        samples.push(LatencySample::new(id, w, l, dropped, t, dip.probe.n_requests)?);
        let (next, s) = next_weight(&st, l, dropped, res)?;
        st = s;
        if next.is_none() {
            break;
        }
        if st.iterations > 1000 {
            return Err(Error::State("exploration did not converge".into()));
        }
    }
    let clean: Vec<LatencySample> = samples.iter().filter(|s| !s.dropped).cloned().collect();
    let used: Vec<LatencySample> = clean.iter().take(max_fit).cloned().collect();
    let curve = fit_curve(&used, l0, st.w_max, t)?;
    let coeffs = curve.coeffs.unwrap_or_default();
    let truth_coeffs = match dip.model {
        LatencyModel::Quadratic { q1, q2 } => Some([
            dip.base_ms + dip.service_ms,
            dip.service_ms * q1 * dip.k,
            dip.service_ms * q2 * dip.k * dip.k,
        ]),
        _ => None,
    };
    let coeff_rel_err = truth_coeffs.map(|tc| {
        tc.iter()
            .zip(coeffs.iter())
            .map(|(a, b)| if *a == 0.0 { b.abs() } else { ((b - a) / a).abs() })
            .fold(0.0, f64::max)
    });
    let predict_rel_err = curve_error(&curve, |w| dip.truth(w), 0.9 * st.w_max.value())?;
    Ok(FidelityReport {
        model: model_name(&dip.model),
        iterations: st.iterations,
        w_max: st.w_max.value(),
        samples: clean.len(),
        fit_samples: used.len(),
        coeffs,
        truth_coeffs,
        coeff_rel_err,
        predict_rel_err,
    })
}

fn model_name(m: &LatencyModel) -> String {
    match m {
        LatencyModel::Mm1 => "mm1".into(),
        LatencyModel::LimitedPs => "limited_ps".into(),
        LatencyModel::Quadratic { q1, q2 } => format!("quadratic(q1={q1};q2={q2})"),
    }
}

/// Largest relative error of the curve's prediction against `truth` over a
/// 200-point grid on [0, hi].
pub fn curve_error(curve: &WeightLatencyCurve, truth: impl Fn(f64) -> f64, hi: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..=200 {
        let w = hi * i as f64 / 200.0;
        let t = truth(w);
        worst = worst.max(((predict_latency_f(curve, w)? - t) / t).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct DipExploration {
    pub dip: DipId,
    pub class: String,
    pub iterations: u32,
    pub explored_at: Option<f64>,
    pub w_max: Option<f64>,
    pub coeffs: Option<[f64; 3]>,
    /// Largest relative error against the noise-free probe model over
    /// w <= 0.9 w_max at the run's offered load.
    pub predict_rel_err: Option<f64>,
}

/// Per-DIP results of the first exploration in a finished run.
pub fn explore_report(run: &RunOutput) -> Result<Vec<DipExploration>> {
    let sc = &run.scenario;
    let mut first: BTreeMap<DipId, (f64, Weight, [f64; 3])> = BTreeMap::new();
    for d in &run.decisions {
        if let DecisionKind::Explored { dip, w_max, coeffs } = &d.kind {
            first.entry(*dip).or_insert((d.time, *w_max, *coeffs));
        }
    }
    let iters = run
        .summary
        .exploration
        .as_ref()
        .map(|e| e.iterations.clone())
        .unwrap_or_default();
    let demand = sc.arrival_rate() * sc.mean_work;
    let mut out = Vec::new();
    for spec in sc.dips() {
        let rate = spec.conn_rate.unwrap_or(f64::INFINITY).min(spec.capacity);
        let service_ms = 1000.0 * sc.mean_work / rate;
        let servers = spec.capacity / rate;
        let truth = |w: f64| {
            sc.probe
                .model
                .latency(spec.base_latency_ms, service_ms, w * demand / spec.capacity, servers)
        };
        let f = first.get(&spec.id);
        let err = match f {
            Some(&(at, w_max, coeffs)) => {
                let l0 = truth(0.0);
                let curve = WeightLatencyCurve::fitted(spec.id, vec![], coeffs, l0, w_max, at);
                Some(curve_error(&curve, truth, 0.9 * w_max.value())?)
            }
            None => None,
        };
        out.push(DipExploration {
            dip: spec.id,
            class: spec.class.clone(),
            iterations: iters.get(&spec.id).copied().unwrap_or(0),
            explored_at: f.map(|x| x.0),
            w_max: f.map(|x| x.1.value()),
            coeffs: f.map(|x| x.2),
            predict_rel_err: err,
        });
    }
    Ok(out)
}

pub fn explore_report_csv(rows: &[DipExploration]) -> String {
    let mut s = String::from("dip,class,iterations,explored_at,w_max,a0,a1,a2,predict_rel_err\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
    for r in rows {
        let c = r.coeffs;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.dip.0 + 1,
            r.class,
            r.iterations,
            opt(r.explored_at),
            opt(r.w_max),
            opt(c.map(|c| c[0])),
            opt(c.map(|c| c[1])),
            opt(c.map(|c| c[2])),
            opt(r.predict_rel_err)
        );
    }
    s
}

// ---- ILP benchmarks ----------------------------------------------------

/// Heterogeneous fitted curves for `n` DIPs: capacities drawn from
/// {1, 2, 4, 8}, M/M/1 truth at `load` of total capacity, each curve fitted
/// from four noise-free samples up to the 5x-l0 point.
pub fn synthetic_curves(n: usize, load: f64, seed: u64) -> Result<BTreeMap<DipId, WeightLatencyCurve>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caps: Vec<f64> = (0..n).map(|_| [1.0, 2.0, 4.0, 8.0][rng.random_range(0..4)]).collect();
    let total: f64 = caps.iter().sum();
    let mut out = BTreeMap::new();
    for (i, &cap) in caps.iter().enumerate() {
        let dip = DipId(i as u32);
        let service = 40.0 * rng.random_range(0.8..1.2);
        let base = rng.random_range(0.0..2.0);
        // Utilization per unit weight.
        let k = load * total / cap;
        let truth = |w: f64| LatencyModel::Mm1.latency(base, service, k * w, 1.0);
        let w_cap = (0.8 / k).min(1.0);
        let w_max = Resolution::DEFAULT.quantize(w_cap)?;
        let mut samples = Vec::new();
        for j in 0..4 {
            let w = Resolution::DEFAULT.quantize(w_max.value() * j as f64 / 3.0)?;
            samples.push(LatencySample::new(dip, w, truth(w.value()), false, 0.0, 1)?);
        }
        out.insert(dip, fit_curve(&samples, truth(0.0), w_max, 0.0)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub dips: usize,
    pub points: usize,
    pub wall_ms: f64,
    pub objective: f64,
}

/// Exact-solver wall time at `points` weights per DIP, best of `repeats`.
pub fn ilp_bench(sizes: &[usize], points: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let curves = synthetic_curves(n, 0.7, seed)?;
        let grid = GridSpec { points, resolution: Resolution::DEFAULT };
        let inst = build_instance(&curves, &grid, 1.0, None, 0.01)?;
        let mut best = f64::INFINITY;
        let mut objective = 0.0;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            let a = solve_exact(&inst)?;
            best = best.min(t.elapsed().as_secs_f64());
            objective = a.objective;
        }
        rows.push(BenchRow { dips: n, points, wall_ms: best * 1e3, objective });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("dips,points,wall_ms,objective\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.3},{:.6}", r.dips, r.points, r.wall_ms, r.objective);
    }
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracyRow {
    pub seed: u64,
    pub one_shot_objective: f64,
    pub two_step_objective: f64,
    /// One-shot objective over two-step objective.
    pub accuracy: f64,
    pub one_shot_ms: f64,
    pub two_step_ms: f64,
}

/// Two-step solve at `points` per step against a one-shot solve at
/// `points^2` on the same `dips`-DIP instance, with a fine weight resolution.
pub fn multistep_accuracy(dips: usize, points: usize, seeds: &[u64], resolution: Resolution)
    -> Result<Vec<AccuracyRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let curves = synthetic_curves(dips, 0.7, seed)?;
        let cfg = MultistepConfig {
            points,
            min_dips: 1,
            resolution,
            ..MultistepConfig::default()
        };
        let grid = GridSpec { points: points * points, resolution };
        let t = Instant::now();
        let inst = build_instance(&curves, &grid, 1.0, cfg.theta, cfg.epsilon)?;
        let one = solve_exact(&inst)?;
        let one_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let two = solve_multistep(&curves, &cfg)?;
        let two_ms = t.elapsed().as_secs_f64() * 1e3;
        let two_obj = two.assignment.objective;
        rows.push(AccuracyRow {
            seed,
            one_shot_objective: one.objective,
            two_step_objective: two_obj,
            accuracy: one.objective / two_obj,
            one_shot_ms: one_ms,
            two_step_ms: two_ms,
        });
    }
    Ok(rows)
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut s = String::from("seed,one_shot_objective,two_step_objective,accuracy,one_shot_ms,two_step_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.3},{:.3}",
            r.seed, r.one_shot_objective, r.two_step_objective, r.accuracy, r.one_shot_ms, r.two_step_ms
        );
    }
    s
}

/// Drain-time estimates logged during a run, in order.
pub fn drain_estimates(run: &RunOutput) -> Vec<f64> {
    run.decisions
        .iter()
        .filter_map(|d| match d.kind {
            DecisionKind::DrainEstimate { seconds } => Some(seconds),
            _ => None,
        })
        .collect()
}
