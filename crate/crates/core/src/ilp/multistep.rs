use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilp::{
    build_instance, build_instance_from, grid_points, solve_exact, Assignment, GridSpec,
};
use crate::types::{DipId, Resolution, Weight, WeightLatencyCurve};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistepConfig {
    pub points: usize,
    /// Half-width of the refinement window as a fraction of each DIP's w_max.
    pub delta_frac: f64,
    /// Pools smaller than this are solved in a single coarse step.
    pub min_dips: usize,
    pub theta: Option<Weight>,
    pub epsilon: f64,
    pub resolution: Resolution,
}

impl Default for MultistepConfig {
    fn default() -> Self {
        MultistepConfig {
            points: 10,
            delta_frac: 0.10,
            min_dips: 100,
            theta: None,
            epsilon: 0.01,
            resolution: Resolution::DEFAULT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultistepOutcome {
    pub assignment: Assignment,
    pub coarse: Assignment,
    pub steps: u8,
}

pub fn solve_multistep(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    cfg: &MultistepConfig,
) -> Result<MultistepOutcome> {
    solve_multistep_total(curves, cfg, 1.0)
}

fn solve_multistep_total(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    cfg: &MultistepConfig,
    total: f64,
) -> Result<MultistepOutcome> {
    let grid = GridSpec {
        points: cfg.points,
        resolution: cfg.resolution,
    };
    let coarse_inst = build_instance(curves, &grid, total, cfg.theta, cfg.epsilon)?;
    let coarse = solve_exact(&coarse_inst)?;
    if curves.len() < cfg.min_dips {
        return Ok(MultistepOutcome {
            assignment: coarse.clone(),
            coarse,
            steps: 1,
        });
    }

    let mut cands: BTreeMap<DipId, Vec<Weight>> = BTreeMap::new();
    for (&d, c) in curves {
        let w_max = c.w_max_at(cfg.resolution).value();
        let w = coarse.choice[&d];
        let delta = cfg.delta_frac * w_max;
        let lo = (w.value() - delta).max(0.0);
        let hi = (w.value() + delta).min(w_max);
        let mut ws = grid_points(lo, hi, cfg.points, cfg.resolution)?;
        ws.push(w);
        ws.sort();
        ws.dedup();
        cands.insert(d, ws);
    }
    let fine_inst =
        build_instance_from(curves, &cands, cfg.resolution, total, cfg.theta, cfg.epsilon)?;
    match solve_exact(&fine_inst) {
        Ok(fine) => Ok(MultistepOutcome {
            assignment: fine,
            coarse,
            steps: 2,
        }),
        Err(Error::Unsat) => Ok(MultistepOutcome {
            assignment: coarse.clone(),
            coarse,
            steps: 1,
        }),
        Err(e) => Err(e),
    }
}

/// Split the weight left over after a measurement round, `1 - w_s`, across
/// already-explored DIPs.
pub fn residual_solve(
    curves: &BTreeMap<DipId, WeightLatencyCurve>,
    w_s: Weight,
    cfg: &MultistepConfig,
) -> Result<Assignment> {
    let total = 1.0 - w_s.value();
    if total <= 0.0 {
        return Err(Error::Unsat);
    }
    Ok(solve_multistep_total(curves, cfg, total)?.assignment)
}
