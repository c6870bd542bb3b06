use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("action/key variant mismatch: {0}")]
    VariantMismatch(&'static str),
    #[error("degenerate interpolation: {0}")]
    DegenerateInterpolation(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape shift lost all probability mass")]
    TapeShiftDegenerate,
    #[error("malformed task input: {0}")]
    MalformedInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
