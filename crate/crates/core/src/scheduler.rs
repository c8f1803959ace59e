//! Packs pending exploration weights into measurement rounds.
//!
//! A round programs a set of DIPs at their requested weights (sum <= 1) and
//! gives the remainder to everyone else: unexplored DIPs get an even share,
//! explored DIPs split theirs by a residual knapsack solve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explore::effective_drop;
use crate::ilp::{residual_solve, MultistepConfig};
use crate::types::{
    rescale_to_steps, sum_weights, DipId, LatencySample, Resolution, Weight, WeightLatencyCurve,
};

/// Ordered by admission priority, highest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MeasurementClass {
    Overloaded,
    Remaining,
    Refresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingMeasurement {
    pub dip: DipId,
    pub weight: Weight,
    pub class: MeasurementClass,
    pub enqueued_at: f64,
    seq: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementQueue {
    items: Vec<PendingMeasurement>,
    next_seq: u64,
}

impl MeasurementQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the pending measurement for `dip`.
    pub fn push(&mut self, dip: DipId, weight: Weight, class: MeasurementClass, now: f64) {
        self.remove(dip);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.items.push(PendingMeasurement {
            dip,
            weight,
            class,
            enqueued_at: now,
            seq,
        });
        self.items.sort_by(|a, b| {
            a.class
                .cmp(&b.class)
                .then(a.enqueued_at.total_cmp(&b.enqueued_at))
                .then(a.seq.cmp(&b.seq))
        });
    }

    pub fn remove(&mut self, dip: DipId) -> Option<PendingMeasurement> {
        let i = self.items.iter().position(|p| p.dip == dip)?;
        Some(self.items.remove(i))
    }

    pub fn get(&self, dip: DipId) -> Option<&PendingMeasurement> {
        self.items.iter().find(|p| p.dip == dip)
    }

    pub fn set_weight(&mut self, dip: DipId, weight: Weight) {
        if let Some(p) = self.items.iter_mut().find(|p| p.dip == dip) {
            p.weight = weight;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingMeasurement> {
        self.items.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Latency at or above this multiple of l0 marks a DIP as overloaded.
    pub overload_factor: f64,
    pub drop_factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            overload_factor: 3.0,
            drop_factor: 5.0,
        }
    }
}

pub fn classify(
    latest: Option<&LatencySample>,
    l0: f64,
    refresh: bool,
    cfg: &SchedulerConfig,
) -> MeasurementClass {
    if let Some(s) = latest {
        if effective_drop(l0, s.mean_latency_ms, s.dropped, cfg.drop_factor)
            || s.mean_latency_ms >= cfg.overload_factor * l0
        {
            return MeasurementClass::Overloaded;
        }
    }
    if refresh {
        MeasurementClass::Refresh
    } else {
        MeasurementClass::Remaining
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub measured: BTreeMap<DipId, Weight>,
    pub filler: BTreeMap<DipId, Weight>,
    pub w_s: Weight,
}

impl RoundPlan {
    pub fn weights(&self) -> BTreeMap<DipId, Weight> {
        let mut all = self.measured.clone();
        all.extend(self.filler.iter().map(|(&d, &w)| (d, w)));
        all
    }
}

/// Admits pendings in priority order, skipping any that would push the
/// round past one, then fills the remaining weight.
///
/// `active` lists every live DIP in the VIP; `explored` holds curves for the
/// DIPs that finished exploring and are not being refreshed.
pub fn schedule_round(
    queue: &mut MeasurementQueue,
    active: &[DipId],
    explored: &BTreeMap<DipId, WeightLatencyCurve>,
    ilp: &MultistepConfig,
) -> Result<RoundPlan> {
    let res = ilp.resolution;
    let one = res.steps_per_one();
    let mut measured: BTreeMap<DipId, Weight> = BTreeMap::new();
    let mut used: u32 = 0;
    let mut admitted = Vec::new();
    for p in queue.iter() {
        if !active.contains(&p.dip) {
            continue;
        }
        let steps = res
            .steps(p.weight)
            .ok_or_else(|| Error::State(format!("{} pending weight off grid", p.dip)))?;
        if used + steps <= one {
            used += steps;
            measured.insert(p.dip, p.weight);
            admitted.push(p.dip);
        }
    }
    for d in &admitted {
        queue.remove(*d);
    }
    let w_s = res.from_steps(used);

    let others: Vec<DipId> = active
        .iter()
        .copied()
        .filter(|d| !measured.contains_key(d))
        .collect();
    if others.is_empty() {
        if measured.is_empty() {
            return Err(Error::State("no live DIPs".into()));
        }
        if used == 0 {
            let even = split_evenly(one, active, res);
            return Ok(RoundPlan {
                measured: even,
                filler: BTreeMap::new(),
                w_s: Weight::ONE,
            });
        }
        let scaled = rescale_to_steps(&measured, one, res)?;
        return Ok(RoundPlan {
            measured: scaled,
            filler: BTreeMap::new(),
            w_s: Weight::ONE,
        });
    }

    let residual = one - used;
    let leftovers: Vec<DipId> = others
        .iter()
        .copied()
        .filter(|d| !explored.contains_key(d))
        .collect();
    let known: BTreeMap<DipId, WeightLatencyCurve> = others
        .iter()
        .filter_map(|d| explored.get(d).map(|c| (*d, c.clone())))
        .collect();

    let mut filler = BTreeMap::new();
    if known.is_empty() {
        filler = split_evenly(residual, &leftovers, res);
    } else {
        let per = residual / others.len() as u32;
        let for_leftovers = per * leftovers.len() as u32;
        let for_known = residual - for_leftovers;
        let solved = if for_known == 0 {
            Err(Error::Unsat)
        } else {
            residual_solve(&known, res.from_steps(one - for_known), ilp)
        };
        match solved {
            Ok(a) if sum_weights(a.choice.values()) > 0 => {
                filler.extend(split_evenly(for_leftovers, &leftovers, res));
                filler.extend(rescale_to_steps(&a.choice, for_known, res)?);
            }
            Ok(_) => {
                filler.extend(split_evenly(for_leftovers, &leftovers, res));
                let ks: Vec<DipId> = known.keys().copied().collect();
                filler.extend(split_evenly(for_known, &ks, res));
            }
            Err(Error::Unsat) => {
                filler = split_evenly(residual, &others, res);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RoundPlan {
        measured,
        filler,
        w_s,
    })
}

/// `total` steps spread as evenly as possible, extra steps to lower ids.
pub fn split_evenly(total: u32, dips: &[DipId], res: Resolution) -> BTreeMap<DipId, Weight> {
    let mut sorted = dips.to_vec();
    sorted.sort();
    let n = sorted.len() as u32;
    if n == 0 {
        return BTreeMap::new();
    }
    let base = total / n;
    let extra = total % n;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, d)| (d, res.from_steps(base + u32::from((i as u32) < extra))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quantize;

    fn q(w: f64) -> Weight {
        quantize(w).unwrap()
    }

    #[test]
    fn skip_over_packing() {
        let mut queue = MeasurementQueue::new();
        for (i, w) in [0.3, 0.4, 0.2, 0.3].iter().enumerate() {
            queue.push(DipId(i as u32), q(*w), MeasurementClass::Remaining, i as f64);
        }
        let active: Vec<DipId> = (0..6).map(DipId).collect();
        let plan = schedule_round(&mut queue, &active, &BTreeMap::new(), &Default::default()).unwrap();
        assert_eq!(plan.measured.len(), 3);
        assert!(!plan.measured.contains_key(&DipId(3)));
        assert_eq!(plan.w_s, q(0.9));
        assert_eq!(queue.len(), 1);
        assert_eq!(sum_weights(plan.weights().values()), 1_000_000);
    }

    #[test]
    fn overloaded_admitted_first() {
        let mut queue = MeasurementQueue::new();
        queue.push(DipId(0), q(0.7), MeasurementClass::Remaining, 0.0);
        queue.push(DipId(1), q(0.7), MeasurementClass::Overloaded, 1.0);
        let active = vec![DipId(0), DipId(1), DipId(2)];
        let plan = schedule_round(&mut queue, &active, &BTreeMap::new(), &Default::default()).unwrap();
        assert_eq!(plan.measured.keys().copied().collect::<Vec<_>>(), vec![DipId(1)]);
    }

    #[test]
    fn leftovers_split_evenly() {
        let mut queue = MeasurementQueue::new();
        queue.push(DipId(0), q(0.6), MeasurementClass::Remaining, 0.0);
        let active: Vec<DipId> = (0..5).map(DipId).collect();
        let plan = schedule_round(&mut queue, &active, &BTreeMap::new(), &Default::default()).unwrap();
        for d in 1..5 {
            assert_eq!(plan.filler[&DipId(d)], q(0.1));
        }
    }

    #[test]
    fn classify_marks_overload() {
        let cfg = SchedulerConfig::default();
        let s = LatencySample::new(DipId(0), q(0.2), 3.5, false, 1.0, 100).unwrap();
        assert_eq!(classify(Some(&s), 1.0, false, &cfg), MeasurementClass::Overloaded);
        let s = LatencySample::new(DipId(0), q(0.2), 1.5, false, 1.0, 100).unwrap();
        assert_eq!(classify(Some(&s), 1.0, true, &cfg), MeasurementClass::Refresh);
        assert_eq!(classify(None, 1.0, false, &cfg), MeasurementClass::Remaining);
    }
}
