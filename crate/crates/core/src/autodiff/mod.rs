//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every forward op as a node. [`Graph::backward`] walks
//! the nodes in reverse insertion order, which is a valid reverse topological
//! order because an op can only consume nodes that already exist.
//!
//! Two numeric modes exist. [`Mode::Train`] clamps division denominators and
//! log arguments at `1e-12`; [`Mode::Exact`] never clamps and reports invalid
//! domains as errors, which is what gradient checking needs.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{central_difference, grad_check, DEFAULT_EPSILON};
pub use graph::{Gradients, Graph, Var, CLAMP_FLOOR};
pub use tensor::Tensor;

pub(crate) use graph::{cross3, dot_slice};

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Clamped division/log, used for 32-bit training.
    Train,
    /// Unclamped, used for gradient checking and verification.
    Exact,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite output from {op}")]
    NonFinite { op: &'static str },
    #[error("invalid domain in {op}: {detail}")]
    InvalidDomain { op: &'static str, detail: String },
    #[error("backward called twice without reset")]
    BackwardTwice,
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("function not finite near the check point")]
    NonFiniteCheck,
}
