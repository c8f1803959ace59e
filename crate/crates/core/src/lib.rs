//! Control plane for weighted L4 load balancing driven by DIP latency.
//!
//! The controller probes each backend (DIP) of a virtual IP (VIP), learns a
//! weight-to-latency curve per DIP, and picks dataplane weights by solving a
//! multiple-choice knapsack over those curves. A discrete-event cluster
//! simulator stands in for the real dataplane.

pub mod error;
pub mod controller;
pub mod dynamics;
pub mod explore;
pub mod ilp;
pub mod scenario;
pub mod scheduler;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    normalize, quantize, DipId, LatencySample, Resolution, VipId, Weight, WeightLatencyCurve,
};
