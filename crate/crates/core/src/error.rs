use thiserror::Error;

use crate::types::DipId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value {value} outside [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0} has no fitted curve yet")]
    NotReady(DipId),

    #[error("{0} has no drop-free samples to fit")]
    NotFittable(DipId),

    #[error("no feasible assignment")]
    Unsat,

    #[error("instance too large for exhaustive search: {combinations} combinations")]
    TooLarge { combinations: u128 },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unknown {0}")]
    UnknownDip(DipId),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(String),

    #[error("replay diverged at t={time}: expected `{expected}`, got `{got}`")]
    ReplayDivergence {
        time: f64,
        expected: String,
        got: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
