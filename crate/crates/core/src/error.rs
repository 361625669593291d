use thiserror::Error;

use crate::game::GameHistory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} out of range: {value} (allowed {allowed})")]
    OutOfRange {
        what: &'static str,
        value: String,
        allowed: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("prompt of {needed} tokens exceeds context window of {window}")]
    ContextOverflow { needed: usize, window: usize },

    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(u32),

    #[error("policy failure: {0}")]
    Policy(String),

    #[error("game aborted after {} rounds: {reason}", partial.len())]
    GameAborted {
        partial: Box<GameHistory>,
        reason: String,
    },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn out_of_range(
        what: &'static str,
        value: impl ToString,
        allowed: impl ToString,
    ) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            allowed: allowed.to_string(),
        }
    }
}
