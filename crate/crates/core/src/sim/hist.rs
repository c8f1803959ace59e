use serde::{Deserialize, Serialize};

const BASE_MS: f64 = 0.01;
const GROWTH: f64 = 1.02;
const BUCKETS: usize = 1100;

/// Log-bucketed latency histogram; percentiles resolve to a bucket's upper edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
    sum_ms: f64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            counts: vec![0; BUCKETS],
            total: 0,
            sum_ms: 0.0,
        }
    }
}

impl LatencyHistogram {
    fn bucket(ms: f64) -> usize {
        if ms <= BASE_MS {
            return 0;
        }
        (((ms / BASE_MS).ln() / GROWTH.ln()).floor() as usize + 1).min(BUCKETS - 1)
    }

    pub fn upper_edge(i: usize) -> f64 {
        BASE_MS * GROWTH.powi(i as i32)
    }

    pub fn record(&mut self, ms: f64) {
        self.counts[Self::bucket(ms)] += 1;
        self.total += 1;
        self.sum_ms += ms;
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum_ms / self.total as f64
        }
    }

    pub fn percentile(&self, p: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let rank = ((p / 100.0) * self.total as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Self::upper_edge(i);
            }
        }
        Self::upper_edge(BUCKETS - 1)
    }

    /// Histogram of everything recorded since `earlier` was cloned.
    pub fn since(&self, earlier: &LatencyHistogram) -> LatencyHistogram {
        LatencyHistogram {
            counts: self
                .counts
                .iter()
                .zip(&earlier.counts)
                .map(|(a, b)| a - b)
                .collect(),
            total: self.total - earlier.total,
            sum_ms: self.sum_ms - earlier.sum_ms,
        }
    }

    /// Non-empty buckets as (upper edge, count).
    pub fn buckets(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (Self::upper_edge(i), c))
    }
}
