use std::collections::BTreeMap;
use std::fmt;

use crate::dynamics::TrafficVerdict;
use crate::types::{DipId, VipId, Weight};

#[derive(Clone, Debug, PartialEq)]
pub enum DecisionKind {
    Baseline { dip: DipId, l0: f64 },
    Round { index: u32, measured: BTreeMap<DipId, Weight>, filler: BTreeMap<DipId, Weight> },
    Step { dip: DipId, weight: Weight, latency: f64, dropped: bool, next: Option<Weight> },
    Explored { dip: DipId, w_max: Weight, coeffs: [f64; 3] },
    Solve { objective: f64, steps: u8 },
    Program { weights: BTreeMap<DipId, Weight> },
    Anchor { dip: DipId, latency: f64 },
    Traffic { verdict: TrafficVerdict, dips: usize },
    Capacity { dip: DipId, observed: f64, expected: f64, delta: f64 },
    Failure { dip: DipId },
    Restored { dip: DipId },
    VipDown,
    Refresh { dips: Vec<DipId> },
    DrainStart { dip: DipId },
    DrainRelease { dip: DipId },
    DrainEstimate { seconds: f64 },
    DrainFailed { dip: DipId },
    Unsat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub time: f64,
    pub vip: VipId,
    pub kind: DecisionKind,
}

pub const DECISION_HEADER: &str = "time,vip,kind,detail";

fn map(m: &BTreeMap<DipId, Weight>) -> String {
    m.iter()
        .map(|(d, w)| format!("{}={}", d.0, w))
        .collect::<Vec<_>>()
        .join("|")
}

impl DecisionKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecisionKind::Baseline { .. } => "baseline",
            DecisionKind::Round { .. } => "round",
            DecisionKind::Step { .. } => "step",
            DecisionKind::Explored { .. } => "explored",
            DecisionKind::Solve { .. } => "solve",
            DecisionKind::Program { .. } => "program",
            DecisionKind::Anchor { .. } => "anchor",
            DecisionKind::Traffic { .. } => "traffic",
            DecisionKind::Capacity { .. } => "capacity",
            DecisionKind::Failure { .. } => "failure",
            DecisionKind::Restored { .. } => "restored",
            DecisionKind::VipDown => "vip_down",
            DecisionKind::Refresh { .. } => "refresh",
            DecisionKind::DrainStart { .. } => "drain_start",
            DecisionKind::DrainRelease { .. } => "drain_release",
            DecisionKind::DrainEstimate { .. } => "drain_estimate",
            DecisionKind::DrainFailed { .. } => "drain_failed",
            DecisionKind::Unsat => "unsat",
        }
    }

    fn detail(&self) -> String {
        match self {
            DecisionKind::Baseline { dip, l0 } => format!("dip={};l0={l0}", dip.0),
            DecisionKind::Round { index, measured, filler } => {
                format!("n={index};measured={};filler={}", map(measured), map(filler))
            }
            DecisionKind::Step { dip, weight, latency, dropped, next } => format!(
                "dip={};w={weight};l={latency};drop={};next={}",
                dip.0,
                *dropped as u8,
                next.map_or("done".to_string(), |w| w.to_string())
            ),
            DecisionKind::Explored { dip, w_max, coeffs } => format!(
                "dip={};w_max={w_max};a0={};a1={};a2={}",
                dip.0, coeffs[0], coeffs[1], coeffs[2]
            ),
            DecisionKind::Solve { objective, steps } => format!("objective={objective};steps={steps}"),
            DecisionKind::Program { weights } => map(weights),
            DecisionKind::Anchor { dip, latency } => format!("dip={};l={latency}", dip.0),
            DecisionKind::Traffic { verdict, dips } => format!("verdict={verdict:?};dips={dips}"),
            DecisionKind::Capacity { dip, observed, expected, delta } => format!(
                "dip={};observed={observed};expected={expected};delta={delta}",
                dip.0
            ),
            DecisionKind::Failure { dip }
            | DecisionKind::Restored { dip }
            | DecisionKind::DrainStart { dip }
            | DecisionKind::DrainRelease { dip }
            | DecisionKind::DrainFailed { dip } => format!("dip={}", dip.0),
            DecisionKind::Refresh { dips } => dips
                .iter()
                .map(|d| d.0.to_string())
                .collect::<Vec<_>>()
                .join("|"),
            DecisionKind::DrainEstimate { seconds } => format!("seconds={seconds}"),
            DecisionKind::VipDown | DecisionKind::Unsat => String::new(),
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.time, self.vip.0, self.kind.name(), self.kind.detail())
    }
}

pub fn decisions_csv(ds: &[Decision]) -> String {
    let mut s = String::from(DECISION_HEADER);
    s.push('\n');
    for d in ds {
        s.push_str(&d.to_string());
        s.push('\n');
    }
    s
}
