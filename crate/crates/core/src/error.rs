//! Error type shared by every module of the simulator.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, PwffError>;

#[derive(Debug, Error)]
pub enum PwffError {
    /// Incompatible tensor shapes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Out-of-range index (token id, class target, row).
    #[error("index error: {0}")]
    Index(String),

    /// API misuse: non-scalar loss, double PEFT insertion, phase order.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity was produced.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Federated exchange mismatch (manifest, group layout).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid channel state such as a non-positive rate.
    #[error("channel error: {0}")]
    Channel(String),

    /// A training phase could not run or produced nothing usable.
    #[error("phase error: {0}")]
    Phase(String),

    /// Preference generation could not separate any pair of responses.
    #[error("degenerate policy: {0}")]
    DegeneratePolicy(String),

    /// Malformed checkpoint or record file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PwffError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        PwffError::Dimension { op, detail: detail.into() }
    }
}
