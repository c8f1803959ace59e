use crate::error::{Error, Result};
use crate::ilp::{Assignment, IlpInstance};

const LIMIT: u128 = 10_000_000;

/// Exhaustive search. Two passes: find the optimum, then return the first
/// feasible vector in lexicographic order whose objective is within
/// tolerance of it.
pub fn brute_force_oracle(inst: &IlpInstance) -> Result<Assignment> {
    inst.validate()?;
    let combos = inst.combinations();
    if combos > LIMIT {
        return Err(Error::TooLarge {
            combinations: combos,
        });
    }
    let (lo, hi) = inst.sum_window().ok_or(Error::Unsat)?;
    let n = inst.dips.len();
    let steps: Vec<Vec<u32>> = inst
        .options
        .iter()
        .map(|o| o.iter().map(|c| inst.resolution.steps(c.weight).unwrap()).collect())
        .collect();
    let feasible = |idx: &[usize]| -> bool {
        let s: u32 = idx.iter().enumerate().map(|(d, &i)| steps[d][i]).sum();
        if s < lo || s > hi {
            return false;
        }
        if let Some(theta) = inst.theta {
            let ws = idx.iter().enumerate().map(|(d, &i)| inst.options[d][i].weight.micros());
            let mx = ws.clone().max().unwrap();
            let mn = ws.min().unwrap();
            if mx - mn > theta.micros() {
                return false;
            }
        }
        true
    };

    let mut opt = f64::INFINITY;
    let mut idx = vec![0usize; n];
    loop {
        if feasible(&idx) {
            opt = opt.min(inst.objective_of(&idx));
        }
        if !advance(&mut idx, inst) {
            break;
        }
    }
    if !opt.is_finite() {
        return Err(Error::Unsat);
    }
    let threshold = opt + IlpInstance::tolerance(opt);
    let mut idx = vec![0usize; n];
    loop {
        if feasible(&idx) && inst.objective_of(&idx) <= threshold {
            return Ok(inst.assignment_of(&idx));
        }
        if !advance(&mut idx, inst) {
            break;
        }
    }
    Err(Error::Invariant("optimum vanished on second pass".into()))
}

/// Odometer with the last DIP varying fastest, i.e. lexicographic order.
fn advance(idx: &mut [usize], inst: &IlpInstance) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < inst.options[d].len() {
            return true;
        }
        idx[d] = 0;
    }
    false
}
