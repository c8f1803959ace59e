use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::sim::{DipSpec, InjectedEvent, Policy, ProbeConfig};
use crate::types::{DipId, Resolution, Weight};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipClass {
    pub name: String,
    pub count: u32,
    #[serde(default = "one")]
    pub cores: f64,
    #[serde(default = "one")]
    pub speed: f64,
    /// Overrides cores * speed.
    #[serde(default)]
    pub capacity: Option<f64>,
    /// Per-connection rate cap; defaults to `speed`.
    #[serde(default)]
    pub conn_rate: Option<f64>,
    /// Serve connections by pure processor sharing, with no per-connection cap.
    #[serde(default)]
    pub shared: bool,
    #[serde(default)]
    pub base_latency_ms: f64,
    /// Static weight hint for weighted baselines; defaults to `cores`.
    #[serde(default)]
    pub hint: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl DipClass {
    pub fn capacity(&self) -> f64 {
        self.capacity.unwrap_or(self.cores * self.speed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fail,
    Restore,
    Capacity,
    Traffic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub at: f64,
    pub kind: EventKind,
    /// 1-based DIP numbers.
    #[serde(default)]
    pub dips: Vec<u32>,
    /// Applies to every DIP of the named class.
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    /// Offered load as a fraction of total pool capacity.
    pub load: f64,
    /// Mean work per connection, in seconds of a speed-1 core.
    pub mean_work: f64,
    /// Summary statistics cover [warmup, duration].
    #[serde(default)]
    pub warmup: f64,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(rename = "dip_class")]
    pub classes: Vec<DipClass>,
    #[serde(default, rename = "event")]
    pub events: Vec<EventSpec>,
}

fn default_policy() -> Policy {
    Policy::Klb
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Scenario> {
        match preset(name_or_path) {
            Some(s) => Ok(s),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.load > 0.0 && self.load < 2.0) {
            return bad(format!("load {} outside (0, 2)", self.load));
        }
        if !(self.mean_work > 0.0) {
            return bad("mean_work must be positive".into());
        }
        if self.classes.is_empty() || self.classes.iter().all(|c| c.count == 0) {
            return bad("at least one DIP is required".into());
        }
        for c in &self.classes {
            if !(c.capacity() > 0.0) {
                return bad(format!("class {} has non-positive capacity", c.name));
            }
        }
        let n = self.dip_count();
        for e in &self.events {
            if e.at < 0.0 || e.at > self.duration {
                return bad(format!("event at {} outside the run", e.at));
            }
            for &d in &e.dips {
                if d == 0 || d > n {
                    return bad(format!("event names DIP {d}, pool has {n}"));
                }
            }
            if let Some(c) = &e.class {
                if !self.classes.iter().any(|k| &k.name == c) {
                    return bad(format!("event names unknown class {c}"));
                }
            }
            if matches!(e.kind, EventKind::Capacity | EventKind::Traffic)
                && !e.factor.is_some_and(|f| f > 0.0)
            {
                return bad("capacity and traffic events need a positive factor".into());
            }
        }
        self.controller.validate()
    }

    pub fn dip_count(&self) -> u32 {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn dips(&self) -> Vec<DipSpec> {
        let mut out = Vec::new();
        let mut id = 0;
        for c in &self.classes {
            for _ in 0..c.count {
                out.push(DipSpec {
                    id: DipId(id),
                    class: c.name.clone(),
                    capacity: c.capacity(),
                    conn_rate: if c.shared { None } else { Some(c.conn_rate.unwrap_or(c.speed)) },
                    base_latency_ms: c.base_latency_ms,
                });
                id += 1;
            }
        }
        out
    }

    pub fn class_of(&self) -> BTreeMap<DipId, String> {
        self.dips().into_iter().map(|d| (d.id, d.class)).collect()
    }

    pub fn total_capacity(&self) -> f64 {
        self.classes.iter().map(|c| c.count as f64 * c.capacity()).sum()
    }

    pub fn arrival_rate(&self) -> f64 {
        self.load * self.total_capacity() / self.mean_work
    }

    /// Static weights for weighted baselines, proportional to class hints.
    pub fn hint_weights(&self) -> Result<BTreeMap<DipId, Weight>> {
        let mut raw = BTreeMap::new();
        let mut id = 0;
        for c in &self.classes {
            for _ in 0..c.count {
                raw.insert(DipId(id), c.hint.unwrap_or(c.cores));
                id += 1;
            }
        }
        let total: f64 = raw.values().sum();
        let q: BTreeMap<DipId, Weight> = raw
            .into_iter()
            .map(|(d, h)| Ok((d, Resolution::DEFAULT.quantize(h / total)?)))
            .collect::<Result<_>>()?;
        crate::types::normalize(&q)
    }

    pub fn injected(&self) -> Vec<(f64, InjectedEvent)> {
        let classes = self.class_of();
        let mut out = Vec::new();
        for e in &self.events {
            let mut targets: Vec<DipId> = e.dips.iter().map(|&d| DipId(d - 1)).collect();
            if let Some(c) = &e.class {
                targets.extend(classes.iter().filter(|(_, k)| *k == c).map(|(d, _)| *d));
            }
            let f = e.factor.unwrap_or(1.0);
            match e.kind {
                EventKind::Traffic => out.push((e.at, InjectedEvent::ScaleTraffic(f))),
                EventKind::Fail => out.extend(targets.iter().map(|&d| (e.at, InjectedEvent::FailDip(d)))),
                EventKind::Restore => {
                    out.extend(targets.iter().map(|&d| (e.at, InjectedEvent::RestoreDip(d))))
                }
                EventKind::Capacity => out.extend(
                    targets
                        .iter()
                        .map(|&d| (e.at, InjectedEvent::ScaleCapacity(d, f))),
                ),
            }
        }
        out
    }
}

fn class(name: &str, count: u32, cores: f64, speed: f64) -> DipClass {
    DipClass {
        name: name.into(),
        count,
        cores,
        speed,
        capacity: None,
        conn_rate: None,
        shared: false,
        base_latency_ms: 0.0,
        hint: None,
    }
}

fn pool30(name: &str, duration: f64) -> Scenario {
    let speed = 1.175;
    Scenario {
        name: name.into(),
        seed: 1,
        duration,
        policy: Policy::Klb,
        load: 0.7,
        mean_work: 0.05,
        warmup: 150.0,
        probe: ProbeConfig::default(),
        controller: ControllerConfig::default(),
        classes: vec![
            class("1u", 16, 1.0, speed),
            class("2u", 8, 2.0, speed),
            class("4u", 4, 4.0, speed),
            class("8u", 2, 8.0, speed),
        ],
        events: vec![],
    }
}

pub const PRESETS: [&str; 6] = [
    "pool30",
    "failure",
    "traffic-change",
    "capacity-change",
    "pool3-noisy",
    "drain",
];

/// The pool30 layout for the change scenarios. These run at 40% offered load:
/// with the M/M/1 probe model the 5x l0 drop proxy fires near 80% utilization,
/// and the largest DIPs only keep headroom to absorb a change when the
/// latency-sum optimum leaves them below that point.
fn dynamics(name: &str) -> Scenario {
    let mut s = pool30(name, 300.0);
    s.load = 0.4;
    s
}

pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "pool30" => pool30(name, 300.0),
        "failure" => {
            let mut s = dynamics(name);
            s.events.push(EventSpec {
                at: 150.0,
                kind: EventKind::Fail,
                dips: vec![25, 26],
                class: None,
                factor: None,
            });
            s
        }
        "traffic-change" => {
            let mut s = dynamics(name);
            s.events.push(EventSpec {
                at: 150.0,
                kind: EventKind::Traffic,
                dips: vec![],
                class: None,
                factor: Some(1.1),
            });
            s
        }
        "capacity-change" => {
            let mut s = dynamics(name);
            s.events.push(EventSpec {
                at: 150.0,
                kind: EventKind::Capacity,
                dips: vec![],
                class: Some("4u".into()),
                factor: Some(0.75),
            });
            s
        }
        "pool3-noisy" => Scenario {
            name: name.into(),
            seed: 1,
            duration: 600.0,
            policy: Policy::Klb,
            load: 0.7,
            mean_work: 0.05,
            warmup: 200.0,
            probe: ProbeConfig::default(),
            controller: ControllerConfig::default(),
            classes: vec![
                class("1x", 1, 1.0, 1.0),
                class("0.8x", 1, 1.0, 0.8),
                class("0.6x", 1, 1.0, 0.6),
            ],
            events: vec![],
        },
        "drain" => {
            let mut s = pool30(name, 600.0);
            s.mean_work = 2.35;
            s.load = 0.6;
            s.controller.first_drain_after = 30.0;
            s
        }
        _ => return None,
    })
}
