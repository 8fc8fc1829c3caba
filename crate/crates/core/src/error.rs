use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or widths do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scoring error on expert {expert}: {reason}")]
    Scoring { expert: usize, reason: String },

    /// Every mixture component is already a depository of an earlier task.
    #[error("all {experts} experts are frozen; enable expansion mode or raise the expert count")]
    CapacityExhausted { experts: usize },

    #[error("index {index} out of range ({what} has {len})")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// `what` names the frozen parameter group, e.g. `expert 0` or `shared`.
    #[error("frozen {what} changed since it was frozen (digest {recorded} -> {current})")]
    FreezeViolation {
        what: String,
        recorded: String,
        current: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
