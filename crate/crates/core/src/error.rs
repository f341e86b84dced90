use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Tensor axis named in shape errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
    Channels,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Height => "height",
            Axis::Width => "width",
            Axis::Channels => "channels",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} of {extent} is not divisible by {divisor}")]
    NotDivisible {
        axis: Axis,
        extent: usize,
        divisor: usize,
    },
    #[error("{axis} of {extent} must be a power of two >= {min}")]
    NotPowerOfTwo { axis: Axis, extent: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("query budget exhausted: {used} of {budget} used, {requested} more requested")]
    BudgetExhausted {
        used: u64,
        budget: u64,
        requested: u64,
    },
    #[error("target {0:?} is not a caption bank entry")]
    TargetNotInBank(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("text is empty")]
    EmptyText,
    #[error("caption bank is invalid: {0}")]
    InvalidBank(String),
    #[error("held-out split has no pairs for task {0}")]
    MissingTask(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI for one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotDivisible { .. } | Error::NotPowerOfTwo { .. } | Error::ShapeMismatch(_) => {
                "shape"
            }
            Error::InvalidEpsilon(_) | Error::NonFinite(_) | Error::InvalidParameter(_) => {
                "parameter"
            }
            Error::BudgetExhausted { .. } => "budget",
            Error::TargetNotInBank(_) | Error::InvalidBank(_) => "bank",
            Error::EmptyPrompt | Error::EmptyText => "text",
            Error::MissingTask(_) => "split",
            Error::Config(_) => "config",
            Error::MissingFile(_) => "missing-file",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}
