//! Shared identifiers, quantized weights, latency samples and fitted curves.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights are stored as integer millionths of the total.
pub const MICROS_PER_ONE: u32 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DipId(pub u32);

impl fmt::Display for DipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dip-{}", self.0 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VipId(pub u32);

impl fmt::Display for VipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vip-{}", self.0 + 1)
    }
}

/// A traffic fraction in [0, 1], held as integer micro-units so that
/// equality and sums are exact. Serialized as a decimal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Weight(u32);

impl Serialize for Weight {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(serde::de::Error::custom(format!("weight {v} outside [0, 1]")));
        }
        Ok(Weight((v * MICROS_PER_ONE as f64).round() as u32))
    }
}

impl Weight {
    pub const ZERO: Weight = Weight(0);
    pub const ONE: Weight = Weight(MICROS_PER_ONE);

    pub fn from_micros(m: u32) -> Result<Weight> {
        if m > MICROS_PER_ONE {
            return Err(Error::Range {
                value: m as f64 / MICROS_PER_ONE as f64,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Weight(m))
    }

    pub fn micros(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / MICROS_PER_ONE as f64
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / MICROS_PER_ONE;
        let frac = self.0 % MICROS_PER_ONE;
        if frac == 0 {
            return write!(f, "{int}");
        }
        let s = format!("{frac:06}");
        write!(f, "{int}.{}", s.trim_end_matches('0'))
    }
}

/// Quantization step for weights. The step must divide one exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Resolution {
    step: u32,
}

impl Resolution {
    pub const DEFAULT: Resolution = Resolution { step: 1000 };

    pub fn new(r: f64) -> Result<Resolution> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Range {
                value: r,
                lo: 1e-6,
                hi: 1.0,
            });
        }
        let step = (r * MICROS_PER_ONE as f64).round() as u32;
        if step == 0
            || !MICROS_PER_ONE.is_multiple_of(step)
            || ((step as f64 / MICROS_PER_ONE as f64) - r).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "resolution {r} must be a multiple of 1e-6 dividing 1"
            )));
        }
        Ok(Resolution { step })
    }

    pub fn step_micros(self) -> u32 {
        self.step
    }

    pub fn steps_per_one(self) -> u32 {
        MICROS_PER_ONE / self.step
    }

    pub fn value(self) -> f64 {
        self.step as f64 / MICROS_PER_ONE as f64
    }

    pub fn from_steps(self, steps: u32) -> Weight {
        Weight(steps * self.step)
    }

    /// Whole steps in `w`; `None` if `w` is not on this grid.
    pub fn steps(self, w: Weight) -> Option<u32> {
        w.0.is_multiple_of(self.step).then_some(w.0 / self.step)
    }

    /// Round to the nearest multiple of the step, ties away from zero.
    pub fn quantize(self, raw: f64) -> Result<Weight> {
        if !(0.0..=1.0).contains(&raw) {
            return Err(Error::Range {
                value: raw,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let n = self.steps_per_one() as f64;
        // Nudge so that decimal ties such as 0.0335 round up despite binary error.
        let steps = (raw * n + 1e-9).round().min(n) as u32;
        Ok(self.from_steps(steps))
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution::DEFAULT
    }
}

impl TryFrom<f64> for Resolution {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        Resolution::new(r)
    }
}

impl From<Resolution> for f64 {
    fn from(r: Resolution) -> f64 {
        r.value()
    }
}

pub fn quantize(raw: f64) -> Result<Weight> {
    Resolution::DEFAULT.quantize(raw)
}

pub fn normalize(weights: &BTreeMap<DipId, Weight>) -> Result<BTreeMap<DipId, Weight>> {
    normalize_with(weights, Resolution::DEFAULT)
}

pub fn normalize_with(
    weights: &BTreeMap<DipId, Weight>,
    res: Resolution,
) -> Result<BTreeMap<DipId, Weight>> {
    rescale_to_steps(weights, res.steps_per_one(), res)
}

/// Scale `weights` proportionally so that they sum to exactly `target` steps.
/// Leftover steps from flooring go to the largest inputs first, ties by id.
pub fn rescale_to_steps(
    weights: &BTreeMap<DipId, Weight>,
    target: u32,
    res: Resolution,
) -> Result<BTreeMap<DipId, Weight>> {
    let total: u64 = weights.values().map(|w| w.0 as u64).sum();
    if total == 0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let mut out: BTreeMap<DipId, u32> = BTreeMap::new();
    let mut assigned: u64 = 0;
    for (&d, w) in weights {
        let s = (w.0 as u64 * target as u64) / total;
        assigned += s;
        out.insert(d, s as u32);
    }
    let mut leftover = target as u64 - assigned;
    if leftover > 0 {
        let mut order: Vec<(DipId, Weight)> = weights.iter().map(|(&d, &w)| (d, w)).collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (d, w) in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            if w.0 > 0 {
                *out.get_mut(d).unwrap() += 1;
                leftover -= 1;
            }
        }
    }
    Ok(out.into_iter().map(|(d, s)| (d, res.from_steps(s))).collect())
}

pub fn sum_weights<'a>(it: impl IntoIterator<Item = &'a Weight>) -> u64 {
    it.into_iter().map(|w| w.0 as u64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub dip: DipId,
    pub weight: Weight,
    pub mean_latency_ms: f64,
    pub dropped: bool,
    pub timestamp: f64,
    pub n_requests: u32,
}

impl LatencySample {
    pub fn new(
        dip: DipId,
        weight: Weight,
        mean_latency_ms: f64,
        dropped: bool,
        timestamp: f64,
        n_requests: u32,
    ) -> Result<Self> {
        if !(mean_latency_ms.is_finite() && mean_latency_ms > 0.0) {
            return Err(Error::Range {
                value: mean_latency_ms,
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
            });
        }
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(Error::Range {
                value: timestamp,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(LatencySample {
            dip,
            weight,
            mean_latency_ms,
            dropped,
            timestamp,
            n_requests,
        })
    }
}

/// Quadratic latency model l(w) = a0 + a1 w + a2 w^2 for one DIP, valid up to
/// `w_max`. A rescale stretches the weight axis by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLatencyCurve {
    pub dip: DipId,
    pub samples: Vec<LatencySample>,
    pub coeffs: Option<[f64; 3]>,
    pub l0: f64,
    pub fitted_at: Option<f64>,
    base_w_max: Weight,
    scale: f64,
}

impl WeightLatencyCurve {
    pub fn unfitted(dip: DipId, l0: f64, w_max: Weight) -> Self {
        WeightLatencyCurve {
            dip,
            samples: Vec::new(),
            coeffs: None,
            l0,
            fitted_at: None,
            base_w_max: w_max,
            scale: 1.0,
        }
    }

    pub fn fitted(
        dip: DipId,
        samples: Vec<LatencySample>,
        coeffs: [f64; 3],
        l0: f64,
        w_max: Weight,
        fitted_at: f64,
    ) -> Self {
        WeightLatencyCurve {
            dip,
            samples,
            coeffs: Some(coeffs),
            l0,
            fitted_at: Some(fitted_at),
            base_w_max: w_max,
            scale: 1.0,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.coeffs.is_some()
    }

    /// Cumulative stretch of the weight axis from rescaling.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn w_max(&self) -> Weight {
        let raw = (self.base_w_max.value() * self.scale).clamp(0.0, 1.0);
        Weight(((raw * MICROS_PER_ONE as f64).round() as u32).min(MICROS_PER_ONE))
    }

    /// Largest weight at which the curve is trusted, quantized.
    pub fn w_max_at(&self, res: Resolution) -> Weight {
        let raw = (self.base_w_max.value() * self.scale).clamp(0.0, 1.0);
        res.quantize(raw).unwrap_or(Weight::ONE)
    }

    pub fn with_scale(&self, factor: f64) -> Self {
        let mut c = self.clone();
        c.scale *= factor;
        c
    }
}

/// Inbound VIP -> list of (DIP, latency, time).
pub type StoreRecord = (DipId, Option<f64>, f64);
