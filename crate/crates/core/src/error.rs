use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("T={t} is not divisible by rate {rate}")]
    Rate { t: usize, rate: usize },

    #[error("incompatible pathways: {0}")]
    Pathway(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{param}` ({which})")]
    NonFiniteGradient { param: String, which: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),

    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged { step: u64, checkpoint: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
