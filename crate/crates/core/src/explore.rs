//! Per-DIP weight exploration and curve fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DipId, LatencySample, Resolution, Weight, WeightLatencyCurve};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    pub alpha: f64,
    pub term_frac: f64,
    /// Latency at or above `drop_factor * l0` counts as a drop.
    pub drop_factor: f64,
    pub resolution: Resolution,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            alpha: 1.0,
            term_frac: 0.05,
            drop_factor: 5.0,
            resolution: Resolution::DEFAULT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationState {
    pub dip: DipId,
    pub w_now: Weight,
    pub w_prev: Weight,
    pub w_max: Weight,
    pub l0: f64,
    pub alpha: f64,
    pub term_frac: f64,
    pub done: bool,
    /// Set when the last step halved back toward `w_prev`.
    pub backtracked: bool,
    pub iterations: u32,
}

impl ExplorationState {
    pub fn new(dip: DipId, l0: f64, w_start: Weight, cfg: &ExploreConfig) -> Result<Self> {
        if !(l0.is_finite() && l0 > 0.0) {
            return Err(Error::Range {
                value: l0,
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
            });
        }
        Ok(ExplorationState {
            dip,
            w_now: w_start,
            w_prev: Weight::ZERO,
            w_max: Weight::ZERO,
            l0,
            alpha: cfg.alpha,
            term_frac: cfg.term_frac,
            done: false,
            backtracked: false,
            iterations: 0,
        })
    }
}

pub fn effective_drop(l0: f64, l_w: f64, explicit_drop: bool, drop_factor: f64) -> bool {
    explicit_drop || l_w >= drop_factor * l0
}

/// One step of the exploration loop. Returns the next weight to try, or
/// `None` once the DIP has converged.
pub fn next_weight(
    state: &ExplorationState,
    l_w: f64,
    dropped: bool,
    res: Resolution,
) -> Result<(Option<Weight>, ExplorationState)> {
    if state.done {
        return Err(Error::State(format!("{} already explored", state.dip)));
    }
    if !(l_w.is_finite() && l_w > 0.0) {
        return Err(Error::Range {
            value: l_w,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    let mut s = state.clone();
    s.iterations += 1;
    if !dropped && s.w_now > s.w_max {
        s.w_max = s.w_now;
    }

    let now = s.w_now.value();
    let gap = (now - s.w_prev.value()).abs();
    if gap <= (s.term_frac * now).max(res.value()) + 1e-12 {
        s.done = true;
        return Ok((None, s));
    }

    let next = if dropped {
        s.backtracked = true;
        res.quantize((now + s.w_prev.value()) / 2.0)?
    } else {
        s.backtracked = false;
        s.w_prev = s.w_now;
        let raw = (now * (1.0 + s.alpha * s.l0 / l_w)).min(1.0);
        res.quantize(raw)?
    };
    let next = if next.is_zero() {
        res.from_steps(1)
    } else {
        next
    };
    s.w_now = next;
    Ok((Some(next), s))
}

/// Least squares on the drop-free samples. The abscissa is scaled to [0, 1]
/// before solving the normal equations.
/// Falls back to a line for two distinct weights and a constant for one.
pub fn fit_curve(
    samples: &[LatencySample],
    l0: f64,
    w_max: Weight,
    fitted_at: f64,
) -> Result<WeightLatencyCurve> {
    let dip = samples
        .first()
        .map(|s| s.dip)
        .ok_or_else(|| Error::InsufficientData("no samples".into()))?;
    let usable: Vec<&LatencySample> = samples
        .iter()
        .filter(|s| !s.dropped && s.mean_latency_ms > 0.0 && s.mean_latency_ms.is_finite())
        .collect();
    if usable.is_empty() {
        return Err(Error::NotFittable(dip));
    }
    let mut distinct: Vec<Weight> = usable.iter().map(|s| s.weight).collect();
    distinct.sort();
    distinct.dedup();
    let degree = (distinct.len() - 1).min(2);

    let xmax = distinct.last().unwrap().value().max(1e-12);
    let m = degree + 1;
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for s in &usable {
        let x = s.weight.value() / xmax;
        let y = s.mean_latency_ms;
        let row = [1.0, x, x * x];
        for i in 0..m {
            atb[i] += row[i] * y;
            for j in 0..m {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let b = solve_small(&mut ata, &mut atb, m).ok_or(Error::NotFittable(dip))?;
    let coeffs = [b[0], b[1] / xmax, b[2] / (xmax * xmax)];
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NotFittable(dip));
    }
    Ok(WeightLatencyCurve::fitted(
        dip,
        samples.to_vec(),
        coeffs,
        l0,
        w_max,
        fitted_at,
    ))
}

fn solve_small(a: &mut [[f64; 3]; 3], b: &mut [f64; 3], m: usize) -> Option<[f64; 3]> {
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            for c in col..m {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for r in (0..m).rev() {
        let mut acc = b[r];
        for c in r + 1..m {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}

fn quad(c: &[f64; 3], x: f64) -> f64 {
    c[0] + x * (c[1] + x * c[2])
}

/// Maximum of the quadratic over [a, b].
fn quad_max_on(c: &[f64; 3], a: f64, b: f64) -> f64 {
    let mut m = quad(c, a).max(quad(c, b));
    if c[2] < 0.0 {
        let v = -c[1] / (2.0 * c[2]);
        if v > a && v < b {
            m = m.max(quad(c, v));
        }
    }
    m
}

/// Predicted latency at `w`: the running maximum of the quadratic over
/// [0, w], so it never decreases, floored at half of l0.
pub fn predict_latency(curve: &WeightLatencyCurve, w: Weight) -> Result<f64> {
    predict_latency_f(curve, w.value())
}

pub fn predict_latency_f(curve: &WeightLatencyCurve, w: f64) -> Result<f64> {
    let c = curve.coeffs.as_ref().ok_or(Error::NotReady(curve.dip))?;
    let x = (w / curve.scale()).max(0.0);
    Ok(quad_max_on(c, 0.0, x).max(0.5 * curve.l0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quantize;

    fn st(w_now: f64, w_prev: f64) -> ExplorationState {
        ExplorationState {
            dip: DipId(0),
            w_now: quantize(w_now).unwrap(),
            w_prev: quantize(w_prev).unwrap(),
            w_max: Weight::ZERO,
            l0: 1.0,
            alpha: 1.0,
            term_frac: 0.05,
            done: false,
            backtracked: false,
            iterations: 0,
        }
    }

    fn sample(w: f64, l: f64) -> LatencySample {
        LatencySample::new(DipId(0), quantize(w).unwrap(), l, false, 1.0, 100).unwrap()
    }

    #[test]
    fn doubles_when_latency_equals_l0() {
        let (n, s) = next_weight(&st(0.1, 0.05), 1.0, false, Resolution::DEFAULT).unwrap();
        assert_eq!(n, Some(quantize(0.2).unwrap()));
        assert_eq!(s.w_max, quantize(0.1).unwrap());
        assert_eq!(s.w_prev, quantize(0.1).unwrap());
    }

    #[test]
    fn drop_halves_back() {
        let (n, s) = next_weight(&st(0.4, 0.2), 9.0, true, Resolution::DEFAULT).unwrap();
        assert_eq!(n, Some(quantize(0.3).unwrap()));
        assert!(s.backtracked);
        assert_eq!(s.w_max, Weight::ZERO);
    }

    #[test]
    fn converges_when_gap_small() {
        let (n, s) = next_weight(&st(0.21, 0.20), 1.0, false, Resolution::DEFAULT).unwrap();
        assert_eq!(n, None);
        assert!(s.done);
        assert_eq!(s.w_max, quantize(0.21).unwrap());
    }

    #[test]
    fn rejects_bad_latency() {
        assert!(next_weight(&st(0.1, 0.0), 0.0, false, Resolution::DEFAULT).is_err());
        assert!(next_weight(&st(0.1, 0.0), f64::NAN, false, Resolution::DEFAULT).is_err());
    }

    #[test]
    fn effective_drop_threshold() {
        assert!(effective_drop(2.0, 10.0, false, 5.0));
        assert!(!effective_drop(2.0, 9.9, false, 5.0));
        assert!(effective_drop(2.0, 1.0, true, 5.0));
    }

    #[test]
    fn fit_recovers_exact_quadratic() {
        let s: Vec<_> = [0.0, 0.05, 0.1, 0.15, 0.2]
            .iter()
            .map(|&w| sample(w, 1.0 + 10.0 * w + 100.0 * w * w))
            .collect();
        let c = fit_curve(&s, 1.0, quantize(0.2).unwrap(), 0.0).unwrap();
        let k = c.coeffs.unwrap();
        assert!((k[0] - 1.0).abs() < 1e-9);
        assert!((k[1] - 10.0).abs() < 1e-7);
        assert!((k[2] - 100.0).abs() < 1e-6);
    }

    #[test]
    fn fit_two_points_is_linear() {
        let s = vec![sample(0.1, 3.0), sample(0.2, 5.0)];
        let c = fit_curve(&s, 1.0, quantize(0.2).unwrap(), 0.0).unwrap();
        let k = c.coeffs.unwrap();
        assert!((k[0] - 1.0).abs() < 1e-9 && (k[1] - 20.0).abs() < 1e-9 && k[2] == 0.0);
    }

    #[test]
    fn fit_needs_drop_free_sample() {
        let mut s = sample(0.1, 3.0);
        s.dropped = true;
        assert_eq!(
            fit_curve(&[s], 1.0, Weight::ZERO, 0.0),
            Err(Error::NotFittable(DipId(0)))
        );
    }

    #[test]
    fn predict_is_running_max() {
        let c = WeightLatencyCurve::fitted(
            DipId(0),
            vec![],
            [5.0, -20.0, 25.0],
            2.0,
            Weight::ONE,
            0.0,
        );
        let a = predict_latency(&c, quantize(0.4).unwrap()).unwrap();
        let b = predict_latency(&c, quantize(0.5).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 5.0);
    }

    #[test]
    fn predict_floors_at_half_l0() {
        let c = WeightLatencyCurve::fitted(DipId(0), vec![], [0.1, 0.0, 0.0], 2.0, Weight::ONE, 0.0);
        assert_eq!(predict_latency(&c, Weight::ZERO).unwrap(), 1.0);
    }

    #[test]
    fn predict_unfitted_errors() {
        let c = WeightLatencyCurve::unfitted(DipId(3), 1.0, Weight::ONE);
        assert_eq!(predict_latency(&c, Weight::ZERO), Err(Error::NotReady(DipId(3))));
    }
}
