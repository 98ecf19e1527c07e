//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrimeError {
    /// A digit sequence whose positional value falls outside `0..C`.
    #[error("invalid code {digits:?}: positional value {value} has no token below {num_classes}")]
    InvalidCode {
        digits: Vec<u32>,
        value: u64,
        num_classes: u32,
    },

    /// A filtered softmax was requested over an empty support.
    #[error("empty support: no valid code is consistent with the query")]
    EmptySupport,

    /// A denoiser target disagrees with an already-revealed digit.
    #[error("inconsistent target: token {token} digit {position} is revealed but differs")]
    InconsistentTarget { token: usize, position: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PrimeError>;
