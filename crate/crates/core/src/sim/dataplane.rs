use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::sim::server::DipServer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Rr,
    Wrr,
    Lc,
    Wlc,
    Random,
    P2,
    Hash,
    /// Weighted round robin with weights chosen by the controller.
    Klb,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::Rr,
        Policy::Wrr,
        Policy::Lc,
        Policy::Wlc,
        Policy::Random,
        Policy::P2,
        Policy::Hash,
        Policy::Klb,
    ];

    pub fn is_weighted(self) -> bool {
        matches!(self, Policy::Wrr | Policy::Wlc | Policy::Klb)
    }

    /// Policies whose traffic split depends on live load rather than weights.
    pub fn is_adaptive(self) -> bool {
        matches!(self, Policy::Lc | Policy::P2)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Policy::Rr => "rr",
            Policy::Wrr => "wrr",
            Policy::Lc => "lc",
            Policy::Wlc => "wlc",
            Policy::Random => "random",
            Policy::P2 => "p2",
            Policy::Hash => "hash",
            Policy::Klb => "klb",
        };
        f.write_str(s)
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Policy::ALL
            .iter()
            .copied()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown policy `{s}`")))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) struct Dataplane {
    pub policy: Policy,
    /// Micro-unit weights by server index.
    pub weights: Vec<u32>,
    current: Vec<i64>,
    rr_next: usize,
    rng: ChaCha8Rng,
}

impl Dataplane {
    pub fn new(policy: Policy, n: usize, rng: ChaCha8Rng) -> Self {
        Dataplane {
            policy,
            weights: vec![1; n],
            current: vec![0; n],
            rr_next: 0,
            rng,
        }
    }

    pub fn set_weights(&mut self, w: Vec<u32>) {
        self.weights = w;
        self.current.iter_mut().for_each(|c| *c = 0);
    }

    /// Live servers with positive weight, or every live server if none has any.
    fn weighted_pool(&self, servers: &[DipServer]) -> (Vec<usize>, bool) {
        let pos: Vec<usize> = (0..servers.len())
            .filter(|&i| !servers[i].failed && self.weights[i] > 0)
            .collect();
        if pos.is_empty() {
            ((0..servers.len()).filter(|&i| !servers[i].failed).collect(), false)
        } else {
            (pos, true)
        }
    }

    pub fn pick(&mut self, servers: &[DipServer], conn: u64) -> Option<usize> {
        let live: Vec<usize> = (0..servers.len()).filter(|&i| !servers[i].failed).collect();
        if live.is_empty() {
            return None;
        }
        Some(match self.policy {
            Policy::Rr => {
                let n = servers.len();
                let mut i = self.rr_next % n;
                while servers[i].failed {
                    i = (i + 1) % n;
                }
                self.rr_next = (i + 1) % n;
                i
            }
            Policy::Wrr | Policy::Klb => {
                let (pool, weighted) = self.weighted_pool(servers);
                let w = |i: usize| if weighted { self.weights[i] as i64 } else { 1 };
                let total: i64 = pool.iter().map(|&i| w(i)).sum();
                let mut best = pool[0];
                for &i in &pool {
                    self.current[i] += w(i);
                    if self.current[i] > self.current[best] {
                        best = i;
                    }
                }
                self.current[best] -= total;
                best
            }
            Policy::Lc => *live
                .iter()
                .min_by_key(|&&i| (servers[i].active(), i))
                .unwrap(),
            Policy::Wlc => {
                let (pool, weighted) = self.weighted_pool(servers);
                let w = |i: usize| if weighted { self.weights[i] as u128 } else { 1 };
                let mut best = pool[0];
                for &i in &pool[1..] {
                    let lhs = servers[i].active() as u128 * w(best);
                    let rhs = servers[best].active() as u128 * w(i);
                    if lhs < rhs {
                        best = i;
                    }
                }
                best
            }
            Policy::Random => live[self.rng.random_range(0..live.len())],
            Policy::P2 => {
                let a = live[self.rng.random_range(0..live.len())];
                let b = live[self.rng.random_range(0..live.len())];
                let load = |i: usize| servers[i].active() as f64 / servers[i].capacity;
                match load(a).total_cmp(&load(b)) {
                    std::cmp::Ordering::Less => a,
                    std::cmp::Ordering::Greater => b,
                    std::cmp::Ordering::Equal => a.min(b),
                }
            }
            Policy::Hash => live[(splitmix64(conn) % live.len() as u64) as usize],
        })
    }
}
