use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyModel {
    /// l = b + S / (1 - rho)
    Mm1,
    /// Exact mean response of the limited processor-sharing queue the
    /// simulator runs: c = capacity / conn_rate connections are served at full
    /// speed. Reduces to `Mm1` when c = 1.
    LimitedPs,
    /// l = b + S * (1 + q1 rho + q2 rho^2)
    Quadratic { q1: f64, q2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_requests: u32,
    /// Per-request noise, as a fraction of the mean.
    pub noise_frac: f64,
    /// Utilization at or above which requests are dropped.
    pub drop_util: f64,
    pub model: LatencyModel,
    /// Let utilization follow weight changes with a first-order lag equal to
    /// the zero-load connection duration.
    pub lag: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_requests: 100,
            noise_frac: 0.02,
            drop_util: 0.95,
            model: LatencyModel::Mm1,
            lag: true,
        }
    }
}

impl LatencyModel {
    /// Mean latency at utilization `rho`; `service_ms` is the zero-load time
    /// and `servers` the number of connections served at full speed.
    pub fn latency(&self, base_ms: f64, service_ms: f64, rho: f64, servers: f64) -> f64 {
        let rho = rho.clamp(0.0, 0.99);
        match *self {
            LatencyModel::Mm1 => base_ms + service_ms / (1.0 - rho),
            LatencyModel::LimitedPs => base_ms + service_ms * limited_ps_factor(rho, servers),
            LatencyModel::Quadratic { q1, q2 } => {
                base_ms + service_ms * (1.0 + q1 * rho + q2 * rho * rho)
            }
        }
    }
}

/// Mean response time over the zero-load time for a birth-death queue with
/// departure rate proportional to min(n, c), at utilization `rho`.
pub fn limited_ps_factor(rho: f64, c: f64) -> f64 {
    let c = c.max(1.0);
    if rho <= 0.0 {
        return 1.0;
    }
    let a = rho * c;
    let m = c.ceil() as u32;
    // Terms below m; p_n = a^n / n!.
    let mut p = 1.0;
    let (mut mass, mut first) = (1.0, 0.0);
    for n in 1..m {
        p *= a / n as f64;
        mass += p;
        first += n as f64 * p;
    }
    // Geometric tail from m on: p_n = p_{m-1} rho^(n-m+1).
    let q = 1.0 - rho;
    mass += p * rho / q;
    first += p * ((m - 1) as f64 * rho / q + rho / (q * q));
    (first / mass) / a
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeOutcome {
    Ok {
        mean_latency_ms: f64,
        dropped: bool,
        utilization: f64,
    },
    Failed,
}

/// Utilization that relaxes exponentially toward its target.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct LoadTrack {
    value: f64,
    target: f64,
    since: f64,
}

impl LoadTrack {
    pub fn at(&self, now: f64, tau: f64) -> f64 {
        if tau <= 0.0 {
            return self.target;
        }
        let dt = (now - self.since).max(0.0);
        self.target + (self.value - self.target) * (-dt / tau).exp()
    }

    pub fn retarget(&mut self, now: f64, target: f64, tau: f64) {
        self.value = self.at(now, tau);
        self.since = now;
        self.target = target;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_server_is_mm1() {
        for rho in [0.0, 0.1, 0.5, 0.9] {
            let f = limited_ps_factor(rho, 1.0);
            assert!((f - 1.0 / (1.0 - rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_servers_match_erlang() {
        // M/M/2: T = S / (1 - rho^2)
        for rho in [0.2, 0.5, 0.8] {
            let f = limited_ps_factor(rho, 2.0);
            assert!((f - 1.0 / (1.0 - rho * rho)).abs() < 1e-12, "{rho}");
        }
    }

    #[test]
    fn more_servers_are_flatter() {
        let f1 = limited_ps_factor(0.7, 1.0);
        let f4 = limited_ps_factor(0.7, 4.0);
        let f8 = limited_ps_factor(0.7, 8.0);
        assert!(f1 > f4 && f4 > f8 && f8 > 1.0);
    }
}
