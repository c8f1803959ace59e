//! The per-VIP control loop: probe, explore, schedule, solve, react.

mod store;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    detect_capacity_change, detect_traffic_change, handle_failure, refresh_plan, rescale_curve,
    DrainEstimate, DrainProcedure, DrainStep, DriftObservation, DynamicsConfig, FailureOutcome,
    FailureTracker, TrafficVerdict,
};
use crate::error::{Error, Result};
use crate::explore::{
    effective_drop, fit_curve, next_weight, predict_latency, ExplorationState, ExploreConfig,
};
use crate::ilp::{solve_multistep, MultistepConfig};
use crate::scheduler::{classify, schedule_round, MeasurementClass, MeasurementQueue, SchedulerConfig};
use crate::sim::{Cluster, ProbeOutcome};
use crate::types::{
    normalize_with, rescale_to_steps, DipId, LatencySample, VipId, Weight, WeightLatencyCurve,
};

pub use store::{LatencyStore, StoreEntry, STORE_HEADER};
pub use trace::{decisions_csv, Decision, DecisionKind, DECISION_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub probe_period: f64,
    pub explore: ExploreConfig,
    pub scheduler: SchedulerConfig,
    pub ilp: MultistepConfig,
    pub dynamics: DynamicsConfig,
    /// Drain time assumed until the first estimate.
    pub initial_drain: f64,
    pub estimate_drain: bool,
    /// Seconds after convergence before the first drain estimate.
    pub first_drain_after: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let dynamics = DynamicsConfig::default();
        ControllerConfig {
            probe_period: 5.0,
            explore: ExploreConfig::default(),
            scheduler: SchedulerConfig::default(),
            ilp: MultistepConfig::default(),
            first_drain_after: dynamics.drain_period,
            dynamics,
            initial_drain: 0.0,
            estimate_drain: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.probe_period, "probe_period")?;
        pos(self.explore.alpha, "alpha")?;
        pos(self.explore.term_frac, "term_frac")?;
        pos(self.explore.drop_factor, "drop_factor")?;
        if self.ilp.points < 2 {
            return Err(Error::Config("ilp.points must be at least 2".into()));
        }
        if self.ilp.resolution != self.explore.resolution {
            return Err(Error::Config("explore and ilp resolution differ".into()));
        }
        if !(0.0..1.0).contains(&self.dynamics.refresh_budget) {
            return Err(Error::Config("refresh_budget must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DipState {
    pub l0: Option<f64>,
    pub explore: Option<ExplorationState>,
    pub curve: Option<WeightLatencyCurve>,
    /// Samples gathered since exploration (re)started; the fit uses these.
    pub epoch: Vec<LatencySample>,
    /// Weight of a measurement that has been programmed but not yet observed.
    pub awaiting: Option<Weight>,
    pub changed_at: f64,
    /// Latency first observed at the current weight, used to spot drift.
    pub anchor: Option<f64>,
    pub refreshing: bool,
    pub removed: bool,
    pub last: Option<LatencySample>,
    pub explored_at: Option<f64>,
    pub iterations: u32,
}

impl DipState {
    fn fresh() -> Self {
        DipState {
            changed_at: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    pub fn is_done(&self) -> bool {
        self.curve.is_some() && !self.refreshing && self.explore.as_ref().is_some_and(|e| e.done)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VipState {
    pub vip: VipId,
    pub dips: BTreeMap<DipId, DipState>,
    pub programmed: BTreeMap<DipId, Weight>,
    pub queue: MeasurementQueue,
    pub drain: DrainEstimate,
    pub drain_proc: Option<DrainProcedure>,
    pub next_drain_at: Option<f64>,
    pub rounds: u32,
    pub converged_at: Option<f64>,
    pub down: bool,
    pub last_change: f64,
    failures: FailureTracker,
    curve_changed: bool,
    solved: Option<BTreeMap<DipId, Weight>>,
}

impl VipState {
    fn new(vip: VipId, dips: &[DipId], drain: f64) -> Self {
        VipState {
            vip,
            dips: dips.iter().map(|&d| (d, DipState::fresh())).collect(),
            programmed: BTreeMap::new(),
            queue: MeasurementQueue::new(),
            drain: DrainEstimate {
                duration: drain,
                measured_at: 0.0,
            },
            drain_proc: None,
            next_drain_at: None,
            rounds: 0,
            converged_at: None,
            down: false,
            last_change: 0.0,
            failures: FailureTracker::default(),
            curve_changed: false,
            solved: None,
        }
    }

    /// Live DIPs that have a baseline latency.
    pub fn live(&self) -> Vec<DipId> {
        self.dips
            .iter()
            .filter(|(_, s)| !s.removed && s.l0.is_some())
            .map(|(&d, _)| d)
            .collect()
    }

    pub fn explored_curves(&self) -> BTreeMap<DipId, WeightLatencyCurve> {
        self.dips
            .iter()
            .filter(|(_, s)| !s.removed && s.is_done())
            .map(|(&d, s)| (d, s.curve.clone().unwrap()))
            .collect()
    }

    pub fn all_explored(&self) -> bool {
        let live = self.live();
        !live.is_empty() && live.iter().all(|d| self.dips[d].is_done())
    }

    fn steady(&self) -> bool {
        self.queue.is_empty()
            && self.dips.values().all(|s| s.awaiting.is_none())
            && self.all_explored()
    }

    pub fn stats(&self) -> ExplorationStats {
        ExplorationStats {
            rounds: self.rounds,
            max_iterations: self.dips.values().map(|s| s.iterations).max().unwrap_or(0),
            iterations: self.dips.iter().map(|(&d, s)| (d, s.iterations)).collect(),
            finished_at: self.converged_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplorationStats {
    pub rounds: u32,
    pub max_iterations: u32,
    pub iterations: BTreeMap<DipId, u32>,
    pub finished_at: Option<f64>,
}

/// Anything that can be probed for a DIP's current latency.
pub trait ProbeSource {
    fn probe(&mut self, dip: DipId) -> Result<ProbeOutcome>;
}

impl ProbeSource for Cluster {
    fn probe(&mut self, dip: DipId) -> Result<ProbeOutcome> {
        Cluster::probe(self, dip)
    }
}

pub struct Controller {
    cfg: ControllerConfig,
    vips: BTreeMap<VipId, VipState>,
    trace: Vec<Decision>,
    rr_cursor: usize,
    /// Wall-clock seconds of each full solve; kept out of the trace so that
    /// the trace stays deterministic.
    solve_wall: Vec<f64>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Result<Controller> {
        cfg.validate()?;
        Ok(Controller {
            cfg,
            vips: BTreeMap::new(),
            trace: Vec::new(),
            rr_cursor: 0,
            solve_wall: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn add_vip(&mut self, vip: VipId, dips: &[DipId]) {
        self.vips
            .insert(vip, VipState::new(vip, dips, self.cfg.initial_drain));
    }

    pub fn vip(&self, vip: VipId) -> Option<&VipState> {
        self.vips.get(&vip)
    }

    pub fn trace(&self) -> &[Decision] {
        &self.trace
    }

    pub fn solve_wall_times(&self) -> &[f64] {
        &self.solve_wall
    }

    /// Order in which VIPs should be serviced: those with pending work first,
    /// oldest change first, then the rest in rotating order.
    pub fn prioritize_vips(&mut self) -> Vec<VipId> {
        let mut busy: Vec<(f64, VipId)> = Vec::new();
        let mut idle: Vec<VipId> = Vec::new();
        for (&v, s) in &self.vips {
            if !s.steady() || s.curve_changed {
                busy.push((s.last_change, v));
            } else {
                idle.push(v);
            }
        }
        busy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<VipId> = busy.into_iter().map(|(_, v)| v).collect();
        if !idle.is_empty() {
            let k = self.rr_cursor % idle.len();
            idle.rotate_left(k);
            self.rr_cursor = self.rr_cursor.wrapping_add(1);
        }
        out.extend(idle);
        out
    }

    /// Probe every DIP of `vip`, log the results and run one tick.
    /// Returns the weights to program, if they changed.
    pub fn control_step(
        &mut self,
        vip: VipId,
        now: f64,
        source: &mut impl ProbeSource,
        store: &mut LatencyStore,
    ) -> Result<Option<BTreeMap<DipId, Weight>>> {
        let st = self.vips.get(&vip).ok_or_else(|| Error::State(format!("unknown {vip}")))?;
        let mut entries = Vec::new();
        for &dip in st.dips.keys() {
            let weight = st.programmed.get(&dip).copied().unwrap_or(Weight::ZERO);
            let (latency_ms, dropped) = match source.probe(dip)? {
                ProbeOutcome::Ok {
                    mean_latency_ms,
                    dropped,
                    ..
                } => (Some(mean_latency_ms), dropped),
                ProbeOutcome::Failed => (None, false),
            };
            entries.push(StoreEntry {
                vip,
                dip,
                weight,
                latency_ms,
                dropped,
                usable: false,
                time: now,
            });
        }
        let out = self.on_tick(vip, now, &mut entries)?;
        for e in entries {
            store.append(e)?;
        }
        Ok(out)
    }

    fn log(&mut self, now: f64, vip: VipId, kind: DecisionKind) {
        log::debug!("t={now} {vip} {}", kind.name());
        self.trace.push(Decision { time: now, vip, kind });
    }

    /// One control tick given this tick's probe results. Fills in each
    /// entry's `usable` flag.
    pub fn on_tick(
        &mut self,
        vip: VipId,
        now: f64,
        entries: &mut [StoreEntry],
    ) -> Result<Option<BTreeMap<DipId, Weight>>> {
        let cfg = self.cfg.clone();
        let mut st = self
            .vips
            .remove(&vip)
            .ok_or_else(|| Error::State(format!("unknown {vip}")))?;
        let mut out = Vec::new();
        let r = tick(&cfg, &mut st, now, entries, &mut out, &mut self.solve_wall);
        for k in out {
            self.log(now, vip, k);
        }
        self.vips.insert(vip, st);
        r
    }
}

struct Fresh {
    raw: BTreeMap<DipId, LatencySample>,
    usable: BTreeMap<DipId, LatencySample>,
    /// DIPs whose probe reported real drops, as opposed to the latency proxy.
    dropping: BTreeSet<DipId>,
}

fn tick(
    cfg: &ControllerConfig,
    st: &mut VipState,
    now: f64,
    entries: &mut [StoreEntry],
    out: &mut Vec<DecisionKind>,
    solve_wall: &mut Vec<f64>,
) -> Result<Option<BTreeMap<DipId, Weight>>> {
    let res = cfg.ilp.resolution;
    let mut fresh = Fresh {
        raw: BTreeMap::new(),
        usable: BTreeMap::new(),
        dropping: BTreeSet::new(),
    };
    let mut failed = Vec::new();
    let mut restored = Vec::new();

    for e in entries.iter_mut() {
        let Some(ds) = st.dips.get_mut(&e.dip) else {
            return Err(Error::UnknownDip(e.dip));
        };
        match e.latency_ms {
            None => {
                if st.failures.record(e.dip, false, &cfg.dynamics) && !ds.removed {
                    failed.push(e.dip);
                }
            }
            Some(l) => {
                st.failures.record(e.dip, true, &cfg.dynamics);
                if ds.removed {
                    restored.push(e.dip);
                }
                e.usable = now > ds.changed_at && now - ds.changed_at >= st.drain.duration;
                let dropped = match ds.l0 {
                    Some(l0) => effective_drop(l0, l, e.dropped, cfg.explore.drop_factor),
                    None => e.dropped,
                };
                if e.dropped {
                    fresh.dropping.insert(e.dip);
                }
                let s = LatencySample::new(e.dip, e.weight, l, dropped, now, 100)?;
                if e.usable {
                    ds.last = Some(s.clone());
                    fresh.usable.insert(e.dip, s.clone());
                }
                fresh.raw.insert(e.dip, s);
            }
        }
    }

    let mut next = st.programmed.clone();
    let mut dirty = false;

    for dip in failed {
        let ds = st.dips.get_mut(&dip).unwrap();
        ds.removed = true;
        ds.awaiting = None;
        ds.anchor = None;
        st.queue.remove(dip);
        out.push(DecisionKind::Failure { dip });
        st.last_change = now;
        if st.drain_proc.as_ref().is_some_and(|p| p.dip == dip) {
            st.drain_proc = None;
            out.push(DecisionKind::DrainFailed { dip });
        }
        if st.live().is_empty() {
            st.down = true;
            out.push(DecisionKind::VipDown);
            return Ok(None);
        }
        next.remove(&dip);
        if st.all_explored() {
            match handle_failure(&st.explored_curves(), &cfg.ilp) {
                Ok(FailureOutcome::Reassigned(w)) => {
                    next = w;
                    st.solved = Some(next.clone());
                }
                Ok(FailureOutcome::VipDown) => {
                    st.down = true;
                    out.push(DecisionKind::VipDown);
                    return Ok(None);
                }
                Err(Error::Unsat) => {
                    out.push(DecisionKind::Unsat);
                    next = normalize_with(&next, res)?;
                }
                Err(e) => return Err(e),
            }
        } else if next.values().any(|w| !w.is_zero()) {
            next = normalize_with(&next, res)?;
        }
        dirty = true;
    }

    for dip in restored {
        let ds = st.dips.get_mut(&dip).unwrap();
        *ds = DipState::fresh();
        st.failures.clear(dip);
        st.down = false;
        out.push(DecisionKind::Restored { dip });
        st.last_change = now;
        if let Some(s) = fresh.raw.get(&dip) {
            fresh.usable.insert(dip, s.clone());
        }
    }

    if let Some(mut p) = st.drain_proc.take() {
        let lat = fresh.raw.get(&p.dip).map(|s| s.mean_latency_ms);
        match p.observe(now, lat, &cfg.dynamics) {
            DrainStep::Wait => st.drain_proc = Some(p),
            DrainStep::Release => {
                out.push(DecisionKind::DrainRelease { dip: p.dip });
                let mut w = st.solved.clone().unwrap_or_else(|| next.clone());
                w.insert(p.dip, Weight::ZERO);
                next = normalize_with(&w, res)?;
                next.insert(p.dip, Weight::ZERO);
                dirty = true;
                st.drain_proc = Some(p);
            }
            DrainStep::Done(d) => {
                st.drain = DrainEstimate {
                    duration: d,
                    measured_at: now,
                };
                out.push(DecisionKind::DrainEstimate { seconds: d });
                st.curve_changed = true;
            }
            DrainStep::Failed => {
                out.push(DecisionKind::DrainFailed { dip: p.dip });
                st.curve_changed = true;
            }
        }
        if st.drain_proc.is_some() {
            return Ok(commit(st, next, dirty, now, out));
        }
    }

    // Baselines for DIPs seen for the first time.
    let newcomers: Vec<DipId> = st
        .dips
        .iter()
        .filter(|(d, s)| !s.removed && s.l0.is_none() && fresh.usable.contains_key(d))
        .map(|(&d, _)| d)
        .collect();
    if !newcomers.is_empty() {
        let n = st.live().len() + newcomers.len();
        let start = res.from_steps((res.steps_per_one() / n as u32).max(1));
        for dip in newcomers {
            let s = fresh.usable.remove(&dip).unwrap();
            let l0 = s.mean_latency_ms;
            let ds = st.dips.get_mut(&dip).unwrap();
            ds.l0 = Some(l0);
            let mut base = s.clone();
            base.weight = Weight::ZERO;
            base.dropped = false;
            ds.epoch = vec![base];
            ds.explore = Some(ExplorationState::new(dip, l0, start, &cfg.explore)?);
            st.queue.push(dip, start, MeasurementClass::Remaining, now);
            out.push(DecisionKind::Baseline { dip, l0 });
            st.last_change = now;
        }
    }

    // Exploration progress.
    let exploring: Vec<DipId> = st
        .dips
        .iter()
        .filter(|(_, s)| !s.removed && s.explore.as_ref().is_some_and(|e| !e.done))
        .map(|(&d, _)| d)
        .collect();
    for dip in exploring {
        let Some(s) = fresh.usable.get(&dip).cloned() else {
            continue;
        };
        let ds = st.dips.get_mut(&dip).unwrap();
        if !s.weight.is_zero() {
            ds.epoch.push(s.clone());
        }
        if ds.awaiting != Some(s.weight) {
            continue;
        }
        ds.awaiting = None;
        let state = ds.explore.as_ref().unwrap();
        let (step, new_state) = next_weight(state, s.mean_latency_ms, s.dropped, res)?;
        ds.iterations = new_state.iterations;
        out.push(DecisionKind::Step {
            dip,
            weight: s.weight,
            latency: s.mean_latency_ms,
            dropped: s.dropped,
            next: step,
        });
        let l0 = new_state.l0;
        let w_max = new_state.w_max;
        ds.explore = Some(new_state);
        match step {
            Some(w) => {
                let class = classify(Some(&s), l0, ds.refreshing, &cfg.scheduler);
                st.queue.push(dip, w, class, now);
            }
            None => {
                let curve = fit_curve(&ds.epoch, l0, w_max, now)?;
                out.push(DecisionKind::Explored {
                    dip,
                    w_max,
                    coeffs: curve.coeffs.unwrap(),
                });
                ds.curve = Some(curve);
                ds.refreshing = false;
                ds.anchor = None;
                ds.explored_at = Some(now);
                st.curve_changed = true;
                st.last_change = now;
            }
        }
    }

    // A DIP that has started missing probes sheds its traffic onto the others;
    // wait for the failure verdict before reading drift into that.
    let suspect = st.dips.iter().any(|(d, s)| !s.removed && st.failures.count(*d) > 0);
    if st.steady() && !dirty && !st.curve_changed && !suspect {
        react_to_drift(cfg, st, now, &fresh, out)?;
    }

    if st.steady() && !st.curve_changed {
        let due = refresh_plan(&st.explored_curves(), now, &cfg.dynamics);
        if !due.is_empty() {
            for &dip in &due {
                let w = next.get(&dip).copied().filter(|w| !w.is_zero()).unwrap_or(res.from_steps(1));
                let ds = st.dips.get_mut(&dip).unwrap();
                let l0 = ds.l0.unwrap();
                ds.refreshing = true;
                ds.explore = Some(ExplorationState::new(dip, l0, w, &cfg.explore)?);
                let mut base = ds.epoch.first().cloned().unwrap();
                base.timestamp = now;
                ds.epoch = vec![base];
                st.queue.push(dip, w, MeasurementClass::Refresh, now);
            }
            out.push(DecisionKind::Refresh { dips: due });
            st.last_change = now;
        }
    }

    let idle = st.dips.values().all(|s| s.awaiting.is_none());
    if !st.queue.is_empty() && idle {
        let live = st.live();
        let explored = st.explored_curves();
        let plan = schedule_round(&mut st.queue, &live, &explored, &cfg.ilp)?;
        st.rounds += 1;
        out.push(DecisionKind::Round {
            index: st.rounds,
            measured: plan.measured.clone(),
            filler: plan.filler.clone(),
        });
        for (&dip, &w) in &plan.measured {
            let ds = st.dips.get_mut(&dip).unwrap();
            ds.awaiting = Some(w);
            if let Some(e) = ds.explore.as_mut() {
                e.w_now = w;
            }
        }
        next = plan.weights();
        dirty = true;
    } else if st.steady() {
        if st.converged_at.is_none() {
            st.converged_at = Some(now);
            if cfg.estimate_drain {
                st.next_drain_at = Some(now + cfg.first_drain_after);
            }
        }
        if st.curve_changed {
            st.curve_changed = false;
            let started = std::time::Instant::now();
            let solved = solve_multistep(&st.explored_curves(), &cfg.ilp);
            solve_wall.push(started.elapsed().as_secs_f64());
            match solved {
                Ok(o) => {
                    out.push(DecisionKind::Solve {
                        objective: o.assignment.objective,
                        steps: o.steps,
                    });
                    let w = if o.assignment.choice.values().all(|w| w.is_zero()) {
                        o.assignment.choice.clone()
                    } else {
                        normalize_with(&o.assignment.choice, res)?
                    };
                    st.solved = Some(w.clone());
                    next = w;
                    dirty = true;
                }
                Err(Error::Unsat) => out.push(DecisionKind::Unsat),
                Err(e) => return Err(e),
            }
        } else if cfg.estimate_drain && st.next_drain_at.is_some_and(|t| now >= t) {
            st.next_drain_at = Some(now + cfg.dynamics.drain_period);
            if let Some((dip, high)) = drain_candidate(st, &next) {
                let l0 = st.dips[&dip].l0.unwrap();
                st.drain_proc = Some(DrainProcedure::start(dip, l0, high, now));
                out.push(DecisionKind::DrainStart { dip });
                let mut rest = next.clone();
                rest.remove(&dip);
                let left = res.steps_per_one() - res.steps(high).unwrap();
                if rest.values().any(|w| !w.is_zero()) && left > 0 {
                    next = rescale_to_steps(&rest, left, res)?;
                }
                next.insert(dip, high);
                dirty = true;
            }
        }
    }

    Ok(commit(st, next, dirty, now, out))
}

/// Lowest-weight explored DIP and the weight to load it with.
fn drain_candidate(st: &VipState, w: &BTreeMap<DipId, Weight>) -> Option<(DipId, Weight)> {
    let res_one = Weight::ONE;
    let (dip, _) = st
        .explored_curves()
        .keys()
        .map(|d| (*d, w.get(d).copied().unwrap_or(Weight::ZERO)))
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))?;
    let high = st.dips[&dip].curve.as_ref()?.w_max_at(crate::types::Resolution::DEFAULT);
    (high < res_one && !high.is_zero()).then_some((dip, high))
}

fn react_to_drift(
    cfg: &ControllerConfig,
    st: &mut VipState,
    now: f64,
    fresh: &Fresh,
    out: &mut Vec<DecisionKind>,
) -> Result<()> {
    let drop_factor = cfg.explore.drop_factor;
    let mut anchored: Vec<DriftObservation> = Vec::new();
    for (&dip, ds) in st.dips.iter_mut() {
        if ds.removed || !ds.is_done() {
            continue;
        }
        let Some(s) = fresh.usable.get(&dip) else { continue };
        let w = st.programmed.get(&dip).copied().unwrap_or(Weight::ZERO);
        if s.weight != w || w.is_zero() {
            continue;
        }
        let l0 = ds.l0.unwrap();
        let curve = ds.curve.as_ref().unwrap();
        let expected = predict_latency(curve, w)?;
        match ds.anchor {
            None => {
                // The first sample at a new weight only sets the reference, since
                // the fit itself can be off by more than the band mid-range. A
                // drop there means the curve overstates headroom.
                if fresh.dropping.contains(&dip) {
                    let target = s.mean_latency_ms.min(drop_factor * l0).max(expected);
                    let (c, delta) = rescale_curve(curve, w, target)?;
                    out.push(DecisionKind::Capacity {
                        dip,
                        observed: s.mean_latency_ms,
                        expected,
                        delta,
                    });
                    ds.curve = Some(c);
                    st.curve_changed = true;
                } else {
                    ds.anchor = Some(s.mean_latency_ms);
                    out.push(DecisionKind::Anchor {
                        dip,
                        latency: s.mean_latency_ms,
                    });
                }
            }
            Some(a) => anchored.push(DriftObservation {
                dip,
                weight: w,
                predicted: a,
                observed: s.mean_latency_ms,
                timestamp: now,
            }),
        }
    }
    if anchored.is_empty() {
        if st.curve_changed {
            st.last_change = now;
        }
        return Ok(());
    }

    let verdict = detect_traffic_change(&anchored, &cfg.dynamics)?;
    let hit: Vec<DipId> = if verdict != TrafficVerdict::None {
        out.push(DecisionKind::Traffic {
            verdict,
            dips: anchored.len(),
        });
        anchored.iter().map(|o| o.dip).collect()
    } else {
        detect_capacity_change(&anchored, &cfg.dynamics)
    };
    for o in anchored.iter().filter(|o| hit.contains(&o.dip)) {
        let ds = st.dips.get_mut(&o.dip).unwrap();
        let l0 = ds.l0.unwrap();
        let curve = ds.curve.as_ref().unwrap();
        let expected = predict_latency(curve, o.weight)?;
        let observed = if fresh.dropping.contains(&o.dip) {
            o.observed.min(drop_factor * l0)
        } else {
            o.observed
        };
        let target = expected * observed / o.predicted;
        let (c, delta) = rescale_curve(curve, o.weight, target)?;
        if verdict == TrafficVerdict::None {
            out.push(DecisionKind::Capacity {
                dip: o.dip,
                observed: o.observed,
                expected: o.predicted,
                delta,
            });
        }
        ds.curve = Some(c);
        ds.anchor = None;
        st.curve_changed = true;
    }
    if st.curve_changed {
        st.last_change = now;
    }
    Ok(())
}

fn commit(
    st: &mut VipState,
    next: BTreeMap<DipId, Weight>,
    dirty: bool,
    now: f64,
    out: &mut Vec<DecisionKind>,
) -> Option<BTreeMap<DipId, Weight>> {
    if !dirty {
        return None;
    }
    let mut full: BTreeMap<DipId, Weight> = BTreeMap::new();
    for (&d, s) in &st.dips {
        let w = if s.removed {
            Weight::ZERO
        } else {
            next.get(&d).copied().unwrap_or(Weight::ZERO)
        };
        full.insert(d, w);
    }
    let old: BTreeMap<DipId, Weight> = st
        .dips
        .keys()
        .map(|d| (*d, st.programmed.get(d).copied().unwrap_or(Weight::ZERO)))
        .collect();
    if full == old && !st.programmed.is_empty() {
        return None;
    }
    for (d, w) in &full {
        if old.get(d) != Some(w) || st.programmed.is_empty() {
            let ds = st.dips.get_mut(d).unwrap();
            ds.changed_at = now;
            ds.anchor = None;
        }
    }
    st.programmed = full.clone();
    out.push(DecisionKind::Program {
        weights: full.clone(),
    });
    Some(full)
}
