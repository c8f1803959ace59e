use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::controller::{
    decisions_csv, Controller, Decision, ExplorationStats, LatencyStore,
};
use crate::error::Result;
use crate::scenario::Scenario;
use crate::sim::{Cluster, ClusterConfig, DipWindow, LatencyHistogram, Policy};
use crate::types::{DipId, VipId, Weight};

pub const VIP: VipId = VipId(0);

#[derive(Clone, Debug, PartialEq)]
pub struct Tick {
    pub time: f64,
    pub windows: Vec<DipWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub window_start: f64,
    pub window_end: f64,
    pub completed: u64,
    pub aborted: u64,
    pub rejected: u64,
    pub mean_latency_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    /// Mean utilization per DIP class over the window.
    pub class_util: BTreeMap<String, f64>,
    /// Largest minus smallest class utilization.
    pub util_spread: f64,
    pub exploration: Option<ExplorationStats>,
}

pub struct RunOutput {
    pub scenario: Scenario,
    pub summary: RunSummary,
    pub ticks: Vec<Tick>,
    /// Every weight programming, in order.
    pub programs: Vec<(f64, BTreeMap<DipId, Weight>)>,
    pub store: LatencyStore,
    pub decisions: Vec<Decision>,
    pub histogram: LatencyHistogram,
    pub digest: u64,
    pub wall_seconds: f64,
    /// Wall time of every full ILP solve, in order.
    pub ilp_wall_seconds: Vec<f64>,
}

pub fn cluster_for(sc: &Scenario, policy: Policy) -> Result<Cluster> {
    let weights = match policy {
        Policy::Wrr | Policy::Wlc => Some(sc.hint_weights()?),
        _ => None,
    };
    Cluster::new(ClusterConfig {
        dips: sc.dips(),
        arrival_rate: sc.arrival_rate(),
        mean_work: sc.mean_work,
        policy,
        seed: sc.seed,
        probe: sc.probe,
        weights,
        record_events: false,
    })
}

pub fn run_scenario(sc: &Scenario) -> Result<RunOutput> {
    sc.validate()?;
    let started = std::time::Instant::now();
    let policy = sc.policy;
    let mut cluster = cluster_for(sc, policy)?;
    for (at, ev) in sc.injected() {
        cluster.schedule(at, ev)?;
    }
    let dips = cluster.dip_ids();
    let mut controller = if policy == Policy::Klb {
        let mut c = Controller::new(sc.controller.clone())?;
        c.add_vip(VIP, &dips);
        Some(c)
    } else {
        None
    };
    let mut store = LatencyStore::new();
    let mut programs = Vec::new();
    // Unweighted policies have nothing to program.
    if policy.is_weighted() && policy != Policy::Klb {
        programs.push((0.0, cluster.weights()));
    }
    let period = sc.controller.probe_period;
    let mut ticks = Vec::new();
    let mut hist_at_warmup: Option<LatencyHistogram> =
        (sc.warmup <= 0.0).then(LatencyHistogram::default);
    let n_ticks = (sc.duration / period - 1e-9).ceil() as u64;
    for k in 0..=n_ticks {
        let t = (k as f64 * period).min(sc.duration);
        if let Some(c) = controller.as_mut() {
            if let Some(w) = c.control_step(VIP, t, &mut cluster, &mut store)? {
                cluster.set_weights(&w)?;
                programs.push((t, w));
            }
        }
        cluster.reset_probe_window();
        if hist_at_warmup.is_none() && t >= sc.warmup {
            hist_at_warmup = Some(cluster.histogram().clone());
        }
        if k == n_ticks {
            break;
        }
        let t_next = ((k + 1) as f64 * period).min(sc.duration);
        cluster.run_until(t_next);
        ticks.push(Tick {
            time: t_next,
            windows: cluster.take_window(),
        });
    }
    let full = cluster.histogram().clone();
    let window = full.since(hist_at_warmup.as_ref().unwrap_or(&LatencyHistogram::default()));
    let classes = sc.class_of();
    let mut class_util: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    let mut aborted = 0;
    for tick in ticks.iter().filter(|t| t.time > sc.warmup + 1e-9) {
        for w in &tick.windows {
            aborted += w.aborted;
            if w.failed {
                continue;
            }
            let e = class_util.entry(classes[&w.dip].clone()).or_default();
            e.0 += w.utilization;
            e.1 += 1;
        }
    }
    let class_util: BTreeMap<String, f64> = class_util
        .into_iter()
        .map(|(k, (s, n))| (k, if n > 0 { s / n as f64 } else { 0.0 }))
        .collect();
    let util_spread = if class_util.is_empty() {
        0.0
    } else {
        let hi = class_util.values().cloned().fold(f64::MIN, f64::max);
        let lo = class_util.values().cloned().fold(f64::MAX, f64::min);
        hi - lo
    };
    let decisions = controller
        .as_ref()
        .map(|c| c.trace().to_vec())
        .unwrap_or_default();
    let exploration = controller
        .as_ref()
        .and_then(|c| c.vip(VIP))
        .map(|v| v.stats());
    let summary = RunSummary {
        scenario: sc.name.clone(),
        policy: policy.to_string(),
        seed: sc.seed,
        window_start: sc.warmup,
        window_end: sc.duration,
        completed: window.count(),
        aborted,
        rejected: cluster.rejected(),
        mean_latency_ms: window.mean(),
        p50_ms: window.percentile(50.0),
        p95_ms: window.percentile(95.0),
        p99_ms: window.percentile(99.0),
        class_util,
        util_spread,
        exploration,
    };
    let ilp_wall_seconds = controller
        .as_ref()
        .map(|c| c.solve_wall_times().to_vec())
        .unwrap_or_default();
    Ok(RunOutput {
        scenario: sc.clone(),
        summary,
        ticks,
        programs,
        store,
        decisions,
        histogram: window,
        digest: cluster.digest(),
        wall_seconds: started.elapsed().as_secs_f64(),
        ilp_wall_seconds,
    })
}

impl RunOutput {
    /// Run-level invariant checks; an empty list means the run is sound.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (t, w) in &self.programs {
            let sum = crate::types::sum_weights(w.values());
            if sum != Weight::ONE.micros() as u64 {
                out.push(format!("t={t}: programmed weights sum to {sum} micros"));
            }
        }
        let mut last = f64::MIN;
        for v in self.store.vips() {
            for e in self.store.entries(v) {
                if e.time < last {
                    out.push(format!("store time went back at t={}", e.time));
                }
                last = e.time;
            }
            last = f64::MIN;
        }
        for t in &self.ticks {
            for w in &t.windows {
                if !(0.0..=1.0 + 1e-9).contains(&w.utilization) {
                    out.push(format!("t={}: {} utilization {}", t.time, w.dip, w.utilization));
                }
            }
        }
        if self.summary.completed != self.histogram.count() {
            out.push("summary count differs from histogram".into());
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("time,dip,weight,util,active,mean_latency_ms,completed,aborted\n");
        for t in &self.ticks {
            for w in &t.windows {
                let _ = writeln!(
                    s,
                    "{:.3},{},{},{:.6},{},{:.6},{},{}",
                    t.time,
                    w.dip.0 + 1,
                    w.weight,
                    w.utilization,
                    w.active,
                    w.mean_latency_ms,
                    w.completed,
                    w.aborted
                );
            }
        }
        s
    }

    pub fn weights_csv(&self) -> String {
        let mut s = String::from("time,dip,weight\n");
        for (t, w) in &self.programs {
            for (d, x) in w {
                let _ = writeln!(s, "{:.3},{},{}", t, d.0 + 1, x);
            }
        }
        s
    }

    pub fn decisions_csv(&self) -> String {
        decisions_csv(&self.decisions)
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("upper_ms,count\n");
        for (edge, c) in self.histogram.buckets() {
            let _ = writeln!(s, "{edge:.6},{c}");
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let m = &self.summary;
        let mut s = String::from(
            "scenario,policy,seed,completed,aborted,rejected,mean_ms,p50_ms,p95_ms,p99_ms,util_spread\n",
        );
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.scenario,
            m.policy,
            m.seed,
            m.completed,
            m.aborted,
            m.rejected,
            m.mean_latency_ms,
            m.p50_ms,
            m.p95_ms,
            m.p99_ms,
            m.util_spread
        );
        s
    }

    pub fn explore_csv(&self) -> String {
        let mut s = String::from("dip,iterations,explored_at,w_max\n");
        let mut w_max: BTreeMap<u32, String> = BTreeMap::new();
        let mut at: BTreeMap<u32, f64> = BTreeMap::new();
        for d in &self.decisions {
            if let crate::controller::DecisionKind::Explored { dip, w_max: w, .. } = &d.kind {
                w_max.insert(dip.0, w.to_string());
                at.insert(dip.0, d.time);
            }
        }
        if let Some(e) = &self.summary.exploration {
            for (d, n) in &e.iterations {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    d.0 + 1,
                    n,
                    at.get(&d.0).map(|t| format!("{t:.3}")).unwrap_or_default(),
                    w_max.get(&d.0).cloned().unwrap_or_default()
                );
            }
        }
        s
    }

    /// Writes every output file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("weights.csv"), self.weights_csv())?;
        std::fs::write(dir.join("store.csv"), self.store.to_csv())?;
        std::fs::write(dir.join("decisions.csv"), self.decisions_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("latency_hist.csv"), self.histogram_csv())?;
        std::fs::write(dir.join("explore.csv"), self.explore_csv())?;
        std::fs::write(dir.join("scenario.toml"), self.scenario.to_toml()?)?;
        let ilp = &self.ilp_wall_seconds;
        let json = serde_json::json!({
            "summary": self.summary,
            "event_digest": format!("{:016x}", self.digest),
            "wall_seconds": self.wall_seconds,
            "ilp": {
                "solves": ilp.len(),
                "mean_ms": if ilp.is_empty() { 0.0 } else { 1e3 * ilp.iter().sum::<f64>() / ilp.len() as f64 },
                "max_ms": 1e3 * ilp.iter().cloned().fold(0.0, f64::max),
            },
        });
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&json).unwrap_or_default(),
        )?;
        Ok(())
    }
}
