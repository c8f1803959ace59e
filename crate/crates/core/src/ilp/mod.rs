//! Weight assignment as a multiple-choice knapsack: pick one candidate weight
//! per DIP so the total is (close to) one and summed latency is minimal.

mod dp;
mod multistep;
mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explore::predict_latency;
use crate::types::{DipId, Resolution, Weight, WeightLatencyCurve};

pub use dp::solve_exact;
pub use multistep::{residual_solve, solve_multistep, MultistepConfig, MultistepOutcome};
pub use oracle::brute_force_oracle;

/// Relative slack when deciding that two objectives are equal.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub weight: Weight,
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    pub dips: Vec<DipId>,
    /// Candidate (weight, latency) pairs per DIP, ascending by weight.
    pub options: Vec<Vec<Choice>>,
    /// Maximum spread between the largest and smallest chosen weight.
    pub theta: Option<Weight>,
    pub total: f64,
    pub epsilon: f64,
    pub resolution: Resolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub choice: BTreeMap<DipId, Weight>,
    pub objective: f64,
    pub y_max: Weight,
    pub y_min: Weight,
}

impl IlpInstance {
    /// Sorts and de-duplicates candidates, then validates.
    pub fn new(
        dips: Vec<DipId>,
        options: Vec<Vec<Choice>>,
        theta: Option<Weight>,
        total: f64,
        epsilon: f64,
        resolution: Resolution,
    ) -> Result<Self> {
        let options = options
            .into_iter()
            .map(|mut o| {
                o.sort_by_key(|c| c.weight);
                o.dedup_by_key(|c| c.weight);
                o
            })
            .collect();
        let inst = IlpInstance {
            dips,
            options,
            theta,
            total,
            epsilon,
            resolution,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInstance(m));
        if self.dips.is_empty() {
            return bad("no DIPs".into());
        }
        if self.dips.len() != self.options.len() {
            return bad("options and DIP list differ in length".into());
        }
        let mut seen = self.dips.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.dips.len() {
            return bad("duplicate DIP".into());
        }
        if !(self.total > 0.0 && self.total <= 1.0 + 1e-12) {
            return bad(format!("total {} outside (0, 1]", self.total));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        for (d, opts) in self.dips.iter().zip(&self.options) {
            if opts.is_empty() {
                return bad(format!("{d} has no candidate weights"));
            }
            for w in opts.windows(2) {
                if w[0].weight >= w[1].weight {
                    return bad(format!("{d} candidates not strictly ascending"));
                }
            }
            for c in opts {
                if self.resolution.steps(c.weight).is_none() {
                    return bad(format!("{d} weight {} off the resolution grid", c.weight));
                }
                if !c.latency.is_finite() {
                    return bad(format!("{d} latency {} at {}", c.latency, c.weight));
                }
            }
        }
        Ok(())
    }

    /// Inclusive range of feasible totals, in resolution steps.
    pub(crate) fn sum_window(&self) -> Option<(u32, u32)> {
        let n = self.resolution.steps_per_one() as f64;
        let lo = ((self.total - self.epsilon) * n - 1e-9).ceil().max(0.0);
        let hi = ((self.total + self.epsilon) * n + 1e-9).floor();
        let max_sum: f64 = self
            .options
            .iter()
            .map(|o| self.resolution.steps(o.last().unwrap().weight).unwrap() as f64)
            .sum();
        let hi = hi.min(max_sum);
        (lo <= hi).then_some((lo as u32, hi as u32))
    }

    pub fn combinations(&self) -> u128 {
        self.options
            .iter()
            .fold(1u128, |acc, o| acc.saturating_mul(o.len() as u128))
    }

    pub(crate) fn tolerance(opt: f64) -> f64 {
        TIE_TOLERANCE * opt.abs().max(1.0)
    }

    /// Canonical objective: left-to-right sum in DIP order.
    pub(crate) fn objective_of(&self, idx: &[usize]) -> f64 {
        let mut s = 0.0;
        for (d, &i) in idx.iter().enumerate() {
            s += self.options[d][i].latency;
        }
        s
    }

    pub(crate) fn assignment_of(&self, idx: &[usize]) -> Assignment {
        let choice: BTreeMap<DipId, Weight> = self
            .dips
            .iter()
            .zip(idx)
            .enumerate()
            .map(|(d, (&dip, &i))| (dip, self.options[d][i].weight))
            .collect();
        let y_max = choice.values().copied().max().unwrap_or(Weight::ZERO);
        let y_min = choice.values().copied().min().unwrap_or(Weight::ZERO);
        Assignment {
            objective: self.objective_of(idx),
            choice,
            y_max,
            y_min,
        }
    }
}

/// Independent feasibility check for a proposed assignment.
pub fn check_feasible(inst: &IlpInstance, a: &Assignment) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    if a.choice.len() != inst.dips.len() {
        return fail("wrong number of DIPs".into());
    }
    let mut total: u64 = 0;
    for (d, dip) in inst.dips.iter().enumerate() {
        let Some(w) = a.choice.get(dip) else {
            return fail(format!("{dip} missing"));
        };
        if !inst.options[d].iter().any(|c| c.weight == *w) {
            return fail(format!("{dip} weight {w} is not a candidate"));
        }
        total += w.micros() as u64;
    }
    let t = total as f64 / crate::types::MICROS_PER_ONE as f64;
    if (t - inst.total).abs() > inst.epsilon + 1e-9 {
        return fail(format!("total {t} not within {} of {}", inst.epsilon, inst.total));
    }
    let hi = a.choice.values().max().unwrap();
    let lo = a.choice.values().min().unwrap();
    if let Some(theta) = inst.theta {
        if hi.micros() - lo.micros() > theta.micros() {
            return fail(format!("spread {}..{} exceeds theta {theta}", lo, hi));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub points: usize,
    pub resolution: Resolution,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 10,
            resolution: Resolution::DEFAULT,
        }
    }
}

/// `k` evenly spaced weights over [lo, hi], quantized and de-duplicated.
pub fn grid_points(lo: f64, hi: f64, k: usize, res: Resolution) -> Result<Vec<Weight>> {
    let mut out = Vec::with_capacity(k);
    if k <= 1 || hi <= lo {
        out.push(res.quantize(lo.clamp(0.0, 1.0))?);
    } else {
        for i in 0..k {
            let w = lo + (hi - lo) * i as f64 / (k - 1) as f64;
            out.push(res.quantize(w.clamp(0.0, 1.0))?);
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn options_for(curve: &WeightLatencyCurve, ws: &[Weight]) -> Result<Vec<Choice>> {
    ws.iter()
        .map(|&w| {
            Ok(Choice {
                weight: w,
                latency: predict_latency(curve, w)?,
            })
        })
        .collect()
}

pub fn build_instance(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    grid: &GridSpec,
    total: f64,
    theta: Option<Weight>,
    epsilon: f64,
) -> Result<IlpInstance> {
    let mut dips = Vec::new();
    let mut options = Vec::new();
    for (&d, c) in curves {
        if !c.is_fitted() {
            return Err(Error::NotReady(d));
        }
        let hi = c.w_max_at(grid.resolution).value();
        let ws = grid_points(0.0, hi, grid.points, grid.resolution)?;
        dips.push(d);
        options.push(options_for(c, &ws)?);
    }
    IlpInstance::new(dips, options, theta, total, epsilon, grid.resolution)
}

/// Instance whose candidates come from explicit per-DIP weight lists.
pub fn build_instance_from(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    weights: &BTreeMap<DipId, Vec<Weight>>,
    resolution: Resolution,
    total: f64,
    theta: Option<Weight>,
    epsilon: f64,
) -> Result<IlpInstance> {
    let mut dips = Vec::new();
    let mut options = Vec::new();
    for (&d, c) in curves {
        if !c.is_fitted() {
            return Err(Error::NotReady(d));
        }
        let ws = weights.get(&d).ok_or(Error::UnknownDip(d))?;
        dips.push(d);
        options.push(options_for(c, ws)?);
    }
    IlpInstance::new(dips, options, theta, total, epsilon, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quantize;

    fn ch(w: f64, l: f64) -> Choice {
        Choice {
            weight: quantize(w).unwrap(),
            latency: l,
        }
    }

    fn inst(opts: Vec<Vec<Choice>>, theta: Option<f64>, eps: f64) -> IlpInstance {
        let dips = (0..opts.len() as u32).map(DipId).collect();
        IlpInstance::new(
            dips,
            opts,
            theta.map(|t| quantize(t).unwrap()),
            1.0,
            eps,
            Resolution::DEFAULT,
        )
        .unwrap()
    }

    #[test]
    fn two_dip_example() {
        let i = inst(
            vec![
                vec![ch(0.0, 1.0), ch(0.5, 2.0), ch(1.0, 9.0)],
                vec![ch(0.0, 1.0), ch(0.5, 3.0), ch(1.0, 9.0)],
            ],
            None,
            0.0,
        );
        let a = solve_exact(&i).unwrap();
        assert_eq!(a.objective, 5.0);
        assert_eq!(a.choice[&DipId(0)], quantize(0.5).unwrap());
        assert_eq!(brute_force_oracle(&i).unwrap(), a);
    }

    #[test]
    fn unsat_when_total_unreachable() {
        let i = inst(
            vec![vec![ch(0.0, 1.0), ch(0.3, 2.0)], vec![ch(0.0, 1.0), ch(0.3, 2.0)]],
            None,
            0.0,
        );
        assert_eq!(solve_exact(&i), Err(Error::Unsat));
        assert_eq!(brute_force_oracle(&i), Err(Error::Unsat));
    }

    #[test]
    fn theta_limits_spread() {
        let opts = vec![
            vec![ch(0.2, 1.0), ch(0.8, 1.0)],
            vec![ch(0.2, 5.0), ch(0.5, 5.0)],
            vec![ch(0.0, 1.0), ch(0.3, 5.0)],
        ];
        let free = solve_exact(&inst(opts.clone(), None, 0.0)).unwrap();
        assert_eq!(free.objective, 7.0);
        let tight = inst(opts, Some(0.3), 0.0);
        let a = solve_exact(&tight).unwrap();
        check_feasible(&tight, &a).unwrap();
        assert!(a.y_max.micros() - a.y_min.micros() <= quantize(0.3).unwrap().micros());
        assert_eq!(brute_force_oracle(&tight).unwrap(), a);
    }

    #[test]
    fn epsilon_allows_slack() {
        let i = inst(
            vec![vec![ch(0.0, 5.0), ch(0.495, 1.0)], vec![ch(0.0, 5.0), ch(0.5, 1.0)]],
            None,
            0.01,
        );
        let a = solve_exact(&i).unwrap();
        assert_eq!(a.objective, 2.0);
        check_feasible(&i, &a).unwrap();
    }

    #[test]
    fn grid_points_example() {
        let g = grid_points(0.0, 0.165, 10, Resolution::DEFAULT).unwrap();
        let want: Vec<Weight> = [0.0, 0.018, 0.037, 0.055, 0.073, 0.092, 0.110, 0.128, 0.147, 0.165]
            .iter()
            .map(|&w| quantize(w).unwrap())
            .collect();
        assert_eq!(g, want);
    }

    #[test]
    fn rejects_empty_candidates() {
        let r = IlpInstance::new(
            vec![DipId(0)],
            vec![vec![]],
            None,
            1.0,
            0.0,
            Resolution::DEFAULT,
        );
        assert!(matches!(r, Err(Error::InvalidInstance(_))));
    }
}
