//! A probe source with closed-form latencies, and a loop that drives the
//! controller against it tick by tick.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use klb_core::controller::{Controller, ControllerConfig, LatencyStore, ProbeSource};
use klb_core::sim::{LatencyModel, ProbeOutcome};
use klb_core::types::{DipId, VipId, Weight};
use klb_core::Result;

/// Probe source with M/M/1 latencies at the programmed weights, no queueing
/// simulation behind it. Utilization follows weights instantly.
pub struct Synthetic {
    pub caps: Vec<f64>,
    /// Offered work per second, in capacity units.
    pub demand: f64,
    pub service_ms: f64,
    pub weights: BTreeMap<DipId, Weight>,
    pub failed: BTreeSet<DipId>,
    pub noise: f64,
    k: u64,
}

impl Synthetic {
    pub fn new(caps: Vec<f64>, load: f64) -> Self {
        let total: f64 = caps.iter().sum();
        Synthetic {
            demand: load * total,
            caps,
            service_ms: 40.0,
            weights: BTreeMap::new(),
            failed: BTreeSet::new(),
            noise: 0.002,
            k: 0,
        }
    }

    pub fn dips(&self) -> Vec<DipId> {
        (0..self.caps.len() as u32).map(DipId).collect()
    }

    pub fn rho(&self, dip: DipId) -> f64 {
        let w = self.weights.get(&dip).map_or(0.0, |w| w.value());
        w * self.demand / self.caps[dip.0 as usize]
    }
}

impl ProbeSource for Synthetic {
    fn probe(&mut self, dip: DipId) -> Result<ProbeOutcome> {
        if self.failed.contains(&dip) {
            return Ok(ProbeOutcome::Failed);
        }
        let rho = self.rho(dip);
        let mean = LatencyModel::Mm1.latency(0.0, self.service_ms, rho, 1.0);
        // Deterministic wobble in [-noise, noise].
        self.k = self.k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = (self.k >> 11) as f64 / (1u64 << 53) as f64;
        Ok(ProbeOutcome::Ok {
            mean_latency_ms: mean * (1.0 + self.noise * (2.0 * u - 1.0)),
            dropped: rho >= 0.95,
            utilization: rho,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Change {
    Fail(DipId),
    Traffic(f64),
    Capacity(DipId, f64),
}

pub struct Drive {
    pub controller: Controller,
    pub store: LatencyStore,
    /// Everything observed after each tick, for per-tick checks.
    pub per_tick: Vec<TickView>,
}

pub struct TickView {
    pub time: f64,
    /// Trace entries logged during this tick.
    pub decisions: Range<usize>,
    pub refreshing_w_max: f64,
    pub programmed_sum: u64,
    pub done: BTreeSet<DipId>,
    pub all_explored: bool,
    /// DIPs holding a drift anchor after the tick.
    pub anchored: BTreeSet<DipId>,
    /// Curve scale and fit time per DIP after the tick.
    pub curves: BTreeMap<DipId, (f64, Option<f64>)>,
}

pub const VIP: VipId = VipId(0);

/// Runs the controller against `src` for `ticks` probe periods, applying
/// `changes` at their tick indices.
pub fn drive(cfg: ControllerConfig, mut src: Synthetic, ticks: usize, changes: Vec<(usize, Change)>) -> Result<Drive> {
    let period = cfg.probe_period;
    let mut c = Controller::new(cfg)?;
    c.add_vip(VIP, &src.dips());
    let mut store = LatencyStore::new();
    let mut per_tick = Vec::new();
    for k in 0..ticks {
        for (at, ch) in &changes {
            if *at == k {
                match *ch {
                    Change::Fail(d) => {
                        src.failed.insert(d);
                    }
                    Change::Traffic(f) => src.demand *= f,
                    Change::Capacity(d, f) => src.caps[d.0 as usize] *= f,
                }
            }
        }
        let now = k as f64 * period;
        let first = c.trace().len();
        if let Some(w) = c.control_step(VIP, now, &mut src, &mut store)? {
            src.weights = w;
        }
        let st = c.vip(VIP).unwrap();
        let refreshing_w_max = st
            .dips
            .values()
            .filter(|s| s.refreshing && !s.removed)
            .filter_map(|s| s.curve.as_ref())
            .map(|c| c.w_max().value())
            .sum();
        per_tick.push(TickView {
            time: now,
            decisions: first..c.trace().len(),
            refreshing_w_max,
            done: st.dips.iter().filter(|(_, s)| s.is_done()).map(|(&d, _)| d).collect(),
            all_explored: st.all_explored(),
            anchored: st.dips.iter().filter(|(_, s)| s.anchor.is_some()).map(|(&d, _)| d).collect(),
            curves: st
                .dips
                .iter()
                .filter_map(|(&d, s)| s.curve.as_ref().map(|c| (d, (c.scale(), c.fitted_at))))
                .collect(),
            programmed_sum: klb_core::types::sum_weights(st.programmed.values()),
        });
    }
    Ok(Drive { controller: c, store, per_tick })
}
