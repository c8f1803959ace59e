//! Property suites over the control plane and the fixtures they share with
//! the acceptance target.

pub mod invariants;
pub mod synthetic;
