use std::fmt;

use thiserror::Error;

/// Which half of the latency model a fit or prediction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Prefill => f.write_str("prefill"),
            Phase::Decode => f.write_str("decode"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{phase} fit is underdetermined: {detail}")]
    FitUnderdetermined { phase: Phase, detail: String },

    #[error("unknown task set `{0}`")]
    UnknownTaskSet(String),

    #[error("unknown model profile `{0}`")]
    UnknownModelProfile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation stalled at t={time:.6}s with {} unfinished request(s): {stuck:?}", stuck.len())]
    SimulationStall { time: f64, stuck: Vec<u64> },

    #[error("malformed record at line {line}: {detail}")]
    Malformed { line: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
