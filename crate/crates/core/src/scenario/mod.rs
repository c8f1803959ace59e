//! Scenario configuration, presets, the simulation runner and experiments.

mod config;
mod experiments;
mod replay;
mod runner;

pub use config::{preset, DipClass, EventKind, EventSpec, Scenario, PRESETS};
pub use experiments::*;
pub use replay::{parse_store_lenient, replay, replay_dir, verify_dir, Mismatch, ReplayReport};
pub use runner::{cluster_for, run_scenario, RunOutput, RunSummary, Tick, VIP};
