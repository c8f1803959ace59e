//! Exact solver: dynamic programming over the quantized weight total.
//!
//! For each spread window [v, v + theta] the table `g[d][s]` holds the least
//! latency of DIPs d.. whose weights sum to exactly `s` steps. The assignment
//! is then rebuilt front to back, taking at every DIP the smallest weight that
//! still admits a completion within tolerance of the optimum. That yields the
//! lexicographically smallest optimal vector in DIP order.

use crate::error::{Error, Result};
use crate::ilp::{Assignment, IlpInstance};

struct Table {
    width: usize,
    g: Vec<f64>,
    /// Allowed candidate indices per DIP, ascending by weight.
    allowed: Vec<Vec<usize>>,
    steps: Vec<Vec<u32>>,
}

impl Table {
    fn at(&self, d: usize, s: usize) -> f64 {
        self.g[d * self.width + s]
    }
}

fn build(inst: &IlpInstance, allowed: Vec<Vec<usize>>, hi: u32) -> Table {
    let n = inst.dips.len();
    let width = hi as usize + 1;
    let steps: Vec<Vec<u32>> = inst
        .options
        .iter()
        .map(|o| {
            o.iter()
                .map(|c| inst.resolution.steps(c.weight).unwrap())
                .collect()
        })
        .collect();
    let mut g = vec![f64::INFINITY; (n + 1) * width];
    g[n * width] = 0.0;
    for d in (0..n).rev() {
        let (head, tail) = g.split_at_mut((d + 1) * width);
        let row = &mut head[d * width..];
        let next = &tail[..width];
        for &i in &allowed[d] {
            let u = steps[d][i] as usize;
            let l = inst.options[d][i].latency;
            if u >= width {
                continue;
            }
            for s in u..width {
                let cand = l + next[s - u];
                if cand < row[s] {
                    row[s] = cand;
                }
            }
        }
    }
    Table {
        width,
        g,
        allowed,
        steps,
    }
}

fn best_total(t: &Table, lo: u32, hi: u32) -> f64 {
    (lo as usize..=hi as usize)
        .map(|s| t.at(0, s))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest-weight-first reconstruction under `threshold`.
fn rebuild(inst: &IlpInstance, t: &Table, lo: u32, hi: u32, threshold: f64) -> Option<Vec<usize>> {
    let n = inst.dips.len();
    let mut idx = Vec::with_capacity(n);
    let mut prefix: u32 = 0;
    let mut cost = 0.0;
    for d in 0..n {
        let mut picked = None;
        for &i in &t.allowed[d] {
            let u = t.steps[d][i];
            let q = prefix + u;
            if q > hi {
                break;
            }
            let l = inst.options[d][i].latency;
            let from = lo.saturating_sub(q) as usize;
            let to = (hi - q) as usize;
            let mut best = f64::INFINITY;
            for s in from..=to.min(t.width - 1) {
                best = best.min(t.at(d + 1, s));
            }
            if cost + l + best <= threshold {
                picked = Some((i, u, l));
                break;
            }
        }
        let (i, u, l) = picked?;
        idx.push(i);
        prefix += u;
        cost += l;
    }
    Some(idx)
}

pub fn solve_exact(inst: &IlpInstance) -> Result<Assignment> {
    inst.validate()?;
    let (lo, hi) = inst.sum_window().ok_or(Error::Unsat)?;
    let windows: Vec<Vec<Vec<usize>>> = match inst.theta {
        None => vec![inst.options.iter().map(|o| (0..o.len()).collect()).collect()],
        Some(theta) => {
            let mut vals: Vec<u32> = inst
                .options
                .iter()
                .flat_map(|o| o.iter().map(|c| c.weight.micros()))
                .collect();
            vals.sort_unstable();
            vals.dedup();
            vals.iter()
                .filter_map(|&v| {
                    let top = v as u64 + theta.micros() as u64;
                    let allowed: Vec<Vec<usize>> = inst
                        .options
                        .iter()
                        .map(|o| {
                            (0..o.len())
                                .filter(|&i| {
                                    let m = o[i].weight.micros();
                                    m >= v && (m as u64) <= top
                                })
                                .collect()
                        })
                        .collect();
                    allowed.iter().all(|a| !a.is_empty()).then_some(allowed)
                })
                .collect()
        }
    };

    let tables: Vec<(Table, f64)> = windows
        .into_iter()
        .map(|a| {
            let t = build(inst, a, hi);
            let opt = best_total(&t, lo, hi);
            (t, opt)
        })
        .filter(|(_, opt)| opt.is_finite())
        .collect();
    let opt = tables
        .iter()
        .map(|(_, o)| *o)
        .fold(f64::INFINITY, f64::min);
    if !opt.is_finite() {
        return Err(Error::Unsat);
    }
    let threshold = opt + IlpInstance::tolerance(opt);
    let mut best: Option<Vec<usize>> = None;
    for (t, o) in &tables {
        if *o > threshold {
            continue;
        }
        if let Some(idx) = rebuild(inst, t, lo, hi, threshold) {
            let better = match &best {
                None => true,
                Some(b) => weights_of(inst, &idx) < weights_of(inst, b),
            };
            if better {
                best = Some(idx);
            }
        }
    }
    let idx = best.ok_or_else(|| Error::Invariant("optimum could not be rebuilt".into()))?;
    Ok(inst.assignment_of(&idx))
}

fn weights_of(inst: &IlpInstance, idx: &[usize]) -> Vec<u32> {
    idx.iter()
        .enumerate()
        .map(|(d, &i)| inst.options[d][i].weight.micros())
        .collect()
}
