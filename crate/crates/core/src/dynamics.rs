//! Reactions to change after convergence: traffic shifts, capacity shifts,
//! DIP failures, periodic curve refresh and drain-time estimation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explore::{predict_latency, predict_latency_f};
use crate::ilp::{solve_multistep, MultistepConfig};
use crate::types::{normalize_with, DipId, Weight, WeightLatencyCurve};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    /// Relative gap between observed and expected latency that flags one DIP.
    pub deviation_band: f64,
    /// Relative shift, in the same direction, that counts toward a traffic verdict.
    pub traffic_band: f64,
    /// Fraction of observed DIPs that must agree for a traffic verdict.
    pub traffic_quorum: f64,
    pub fail_threshold: u32,
    /// Refresh may touch DIPs whose w_max sums to at most this.
    pub refresh_budget: f64,
    pub refresh_period: f64,
    /// A drained DIP is idle once within this fraction of l0.
    pub drain_recovery: f64,
    /// Latency multiple of l0 that counts as loaded when estimating drain.
    pub drain_load_factor: f64,
    pub drain_timeout: f64,
    pub drain_period: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            deviation_band: 0.20,
            traffic_band: 0.02,
            traffic_quorum: 0.80,
            fail_threshold: 3,
            refresh_budget: 0.05,
            refresh_period: 1800.0,
            drain_recovery: 0.10,
            drain_load_factor: 1.5,
            drain_timeout: 600.0,
            drain_period: 7200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftObservation {
    pub dip: DipId,
    pub weight: Weight,
    /// Latency expected at `weight`: the anchored reading if one exists,
    /// otherwise the curve prediction.
    pub predicted: f64,
    pub observed: f64,
    pub timestamp: f64,
}

impl DriftObservation {
    fn ratio(&self) -> f64 {
        self.observed / self.predicted
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficVerdict {
    Increase,
    Decrease,
    None,
}

pub fn detect_traffic_change(
    obs: &[DriftObservation],
    cfg: &DynamicsConfig,
) -> Result<TrafficVerdict> {
    if obs.iter().any(|o| !(o.predicted > 0.0 && o.observed > 0.0)) {
        return Err(Error::Degenerate("non-positive latency in drift observation".into()));
    }
    if obs.len() < 2 {
        return Ok(TrafficVerdict::None);
    }
    let n = obs.len() as f64;
    let up = obs.iter().filter(|o| o.ratio() > 1.0 + cfg.traffic_band).count() as f64;
    let down = obs.iter().filter(|o| o.ratio() < 1.0 - cfg.traffic_band).count() as f64;
    Ok(if up >= cfg.traffic_quorum * n {
        TrafficVerdict::Increase
    } else if down >= cfg.traffic_quorum * n {
        TrafficVerdict::Decrease
    } else {
        TrafficVerdict::None
    })
}

/// DIPs whose observation strays from expectation by more than the band.
pub fn detect_capacity_change(obs: &[DriftObservation], cfg: &DynamicsConfig) -> Vec<DipId> {
    obs.iter()
        .filter(|o| (o.observed - o.predicted).abs() > cfg.deviation_band * o.predicted)
        .map(|o| o.dip)
        .collect()
}

/// Stretches the curve's weight axis so that it passes through
/// (`w1`, `l_observed`). Returns the new curve and the factor applied.
pub fn rescale_curve(
    curve: &WeightLatencyCurve,
    w1: Weight,
    l_observed: f64,
) -> Result<(WeightLatencyCurve, f64)> {
    if w1.is_zero() {
        return Err(Error::Degenerate("cannot rescale at zero weight".into()));
    }
    if !(l_observed.is_finite() && l_observed > 0.0) {
        return Err(Error::Range {
            value: l_observed,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    let at_w1 = predict_latency(curve, w1)?;
    if (at_w1 - l_observed).abs() <= 1e-12 * at_w1 {
        return Ok((curve.clone(), 1.0));
    }
    let w2 = inverse(curve, l_observed)?;
    let delta = w1.value() / w2;
    Ok((curve.with_scale(delta), delta))
}

/// Smallest weight in (0, 1] whose prediction reaches `l`, clamped to the ends.
fn inverse(curve: &WeightLatencyCurve, l: f64) -> Result<f64> {
    let floor = crate::types::Resolution::DEFAULT.value() * 1e-3;
    if predict_latency_f(curve, floor)? >= l {
        return Ok(floor);
    }
    if predict_latency_f(curve, 1.0)? < l {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (floor, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if predict_latency_f(curve, mid)? >= l {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureTracker {
    consecutive: BTreeMap<DipId, u32>,
}

impl FailureTracker {
    /// Records one probe outcome; true once `dip` reaches the threshold.
    pub fn record(&mut self, dip: DipId, ok: bool, cfg: &DynamicsConfig) -> bool {
        let c = self.consecutive.entry(dip).or_insert(0);
        if ok {
            *c = 0;
            false
        } else {
            *c += 1;
            *c >= cfg.fail_threshold
        }
    }

    pub fn count(&self, dip: DipId) -> u32 {
        self.consecutive.get(&dip).copied().unwrap_or(0)
    }

    pub fn clear(&mut self, dip: DipId) {
        self.consecutive.remove(&dip);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FailureOutcome {
    Reassigned(BTreeMap<DipId, Weight>),
    VipDown,
}

/// Re-solve over the surviving DIPs' curves after a failure.
pub fn handle_failure(
    survivors: &BTreeMap<DipId, WeightLatencyCurve>,
    ilp: &MultistepConfig,
) -> Result<FailureOutcome> {
    if survivors.is_empty() {
        return Ok(FailureOutcome::VipDown);
    }
    let out = solve_multistep(survivors, ilp)?;
    Ok(FailureOutcome::Reassigned(normalize_with(
        &out.assignment.choice,
        ilp.resolution,
    )?))
}

/// DIPs due for re-exploration, oldest fit first, within the w_max budget.
pub fn refresh_plan(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    now: f64,
    cfg: &DynamicsConfig,
) -> Vec<DipId> {
    let mut due: Vec<(f64, DipId, f64)> = curves
        .iter()
        .filter_map(|(&d, c)| {
            let t = c.fitted_at?;
            (now - t >= cfg.refresh_period).then(|| (t, d, c.w_max().value()))
        })
        .collect();
    due.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut used = 0.0;
    let mut out = Vec::new();
    for (_, d, w) in due {
        if used + w <= cfg.refresh_budget + 1e-12 {
            used += w;
            out.push(d);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrainEstimate {
    pub duration: f64,
    pub measured_at: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DrainPhase {
    Loading { since: f64 },
    Draining { t1: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DrainStep {
    Wait,
    /// Load is high: set the DIP's weight to zero now.
    Release,
    Done(f64),
    Failed,
}

/// Load one DIP, then cut it to zero weight and time how long until its
/// latency returns to idle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrainProcedure {
    pub dip: DipId,
    pub l0: f64,
    pub high: Weight,
    pub phase: DrainPhase,
}

impl DrainProcedure {
    pub fn start(dip: DipId, l0: f64, high: Weight, now: f64) -> Self {
        DrainProcedure {
            dip,
            l0,
            high,
            phase: DrainPhase::Loading { since: now },
        }
    }

    pub fn observe(&mut self, now: f64, latency: Option<f64>, cfg: &DynamicsConfig) -> DrainStep {
        match self.phase {
            DrainPhase::Loading { since } => {
                let loaded = latency.is_some_and(|l| l >= cfg.drain_load_factor * self.l0);
                if now > since && (loaded || now - since >= cfg.drain_timeout) {
                    self.phase = DrainPhase::Draining { t1: now };
                    DrainStep::Release
                } else {
                    DrainStep::Wait
                }
            }
            DrainPhase::Draining { t1 } => {
                if now - t1 > cfg.drain_timeout {
                    return DrainStep::Failed;
                }
                match latency {
                    Some(l) if now > t1 && l <= (1.0 + cfg.drain_recovery) * self.l0 => {
                        DrainStep::Done(now - t1)
                    }
                    _ => DrainStep::Wait,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quantize;

    fn obs(dip: u32, predicted: f64, observed: f64) -> DriftObservation {
        DriftObservation {
            dip: DipId(dip),
            weight: quantize(0.1).unwrap(),
            predicted,
            observed,
            timestamp: 0.0,
        }
    }

    fn lin() -> WeightLatencyCurve {
        WeightLatencyCurve::fitted(DipId(0), vec![], [0.0, 10.0, 0.0], 1.0, quantize(0.8).unwrap(), 0.0)
    }

    #[test]
    fn traffic_increase_by_quorum() {
        let cfg = DynamicsConfig::default();
        let o: Vec<_> = (0..5).map(|i| obs(i, 10.0, 11.0)).collect();
        assert_eq!(detect_traffic_change(&o, &cfg).unwrap(), TrafficVerdict::Increase);
        let mut o2 = o.clone();
        o2[0].observed = 10.0;
        o2[1].observed = 10.0;
        assert_eq!(detect_traffic_change(&o2, &cfg).unwrap(), TrafficVerdict::None);
        assert!(detect_traffic_change(&[obs(0, 0.0, 1.0)], &cfg).is_err());
    }

    #[test]
    fn capacity_band() {
        let cfg = DynamicsConfig::default();
        let o = vec![obs(0, 10.0, 12.5), obs(1, 10.0, 11.0)];
        assert_eq!(detect_capacity_change(&o, &cfg), vec![DipId(0)]);
    }

    #[test]
    fn rescale_example() {
        let c = lin();
        let (r, d) = rescale_curve(&c, quantize(0.5).unwrap(), 6.25).unwrap();
        assert!((d - 0.8).abs() < 1e-9);
        let p = predict_latency(&r, quantize(0.5).unwrap()).unwrap();
        assert!((p - 6.25).abs() < 1e-6);
    }

    #[test]
    fn rescale_fixed_point() {
        let c = lin();
        let (_, d) = rescale_curve(&c, quantize(0.5).unwrap(), 5.0).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn failure_threshold() {
        let cfg = DynamicsConfig::default();
        let mut t = FailureTracker::default();
        assert!(!t.record(DipId(0), false, &cfg));
        assert!(!t.record(DipId(0), false, &cfg));
        assert!(!t.record(DipId(0), true, &cfg));
        assert!(!t.record(DipId(0), false, &cfg));
        assert!(!t.record(DipId(0), false, &cfg));
        assert!(t.record(DipId(0), false, &cfg));
    }

    #[test]
    fn last_dip_failure_is_vip_down() {
        let out = handle_failure(&BTreeMap::new(), &MultistepConfig::default()).unwrap();
        assert_eq!(out, FailureOutcome::VipDown);
    }

    #[test]
    fn refresh_respects_budget() {
        let cfg = DynamicsConfig::default();
        let mut curves = BTreeMap::new();
        for (i, (w, t)) in [(0.03, 0.0), (0.03, 10.0), (0.01, 20.0), (0.2, 0.0)].iter().enumerate() {
            let c = WeightLatencyCurve::fitted(DipId(i as u32), vec![], [1.0, 0.0, 0.0], 1.0, quantize(*w).unwrap(), *t);
            curves.insert(DipId(i as u32), c);
        }
        let plan = refresh_plan(&curves, 4000.0, &cfg);
        assert_eq!(plan, vec![DipId(0), DipId(2)]);
        assert!(refresh_plan(&curves, 100.0, &cfg).is_empty());
    }

    #[test]
    fn drain_procedure_times_release() {
        let cfg = DynamicsConfig::default();
        let mut p = DrainProcedure::start(DipId(0), 1.0, quantize(0.5).unwrap(), 0.0);
        assert_eq!(p.observe(5.0, Some(1.2), &cfg), DrainStep::Wait);
        assert_eq!(p.observe(10.0, Some(3.0), &cfg), DrainStep::Release);
        assert_eq!(p.observe(15.0, Some(1.5), &cfg), DrainStep::Wait);
        assert_eq!(p.observe(20.0, Some(1.05), &cfg), DrainStep::Done(10.0));
    }
}
