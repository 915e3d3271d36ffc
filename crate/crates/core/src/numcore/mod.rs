//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, grad_check, GradCheckReport};
pub use tape::{ew, EwOp, Gradients, Operand, Tape, Var};
pub(crate) use tape::softmax_slice;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: argument outside the domain at element {index}")]
    Domain { op: &'static str, index: usize },
    #[error("{op}: index {index} out of bounds ({bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: row {row} has no selected entries")]
    EmptyRow { op: &'static str, row: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on a value that does not depend on any parameter")]
    Untracked,
    #[error("{0}")]
    InvalidArgument(String),
}
