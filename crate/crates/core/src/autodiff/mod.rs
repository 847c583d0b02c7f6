//! Dense `f64` tensors, a reverse-mode tape and first-order optimizers.
//!
//! Every model in the crate is evaluated by recording operations on a fresh
//! [`Tape`] per update; [`Tape::backward`] then yields gradients for the
//! tracked leaves, which are copied into [`Param`]s and consumed by an
//! [`OptimizerState`]. All reductions run sequentially in a fixed order, so
//! repeating a computation reproduces it bit for bit.

mod optim;
mod tape;
mod tensor;

pub use optim::{OptimizerKind, OptimizerState, Param};
pub use tape::{softmax_rows_values, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("usage error: {0}")]
    Usage(String),
}
