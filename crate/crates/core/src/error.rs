use thiserror::Error;

use crate::cli::checkpoint::CheckpointError;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    /// A tape node produced NaN or an infinity.
    #[error("non-finite value at node {node}")]
    NonFinite { node: String },

    /// A bound term evaluated to a non-finite number.
    #[error("non-finite bound term at t = {t}")]
    NonFiniteTerm { t: usize },

    #[error("every importance weight is -inf (the model assigns zero density)")]
    ZeroDensity,

    /// Training produced a non-finite bound; parameters were rolled back.
    #[error("training diverged at step {step}; parameters restored to step {last_good_step}")]
    Diverged { step: usize, last_good_step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
