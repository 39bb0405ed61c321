//! Dense `f64` arrays and a tape-based reverse-mode differentiator.
//!
//! Everything the model computes is expressed as [`Tape`] operations on
//! [`NumArray`] values, so any loss can be differentiated with
//! [`Tape::backward`] and audited against central differences with
//! [`grad_check`].

mod array;
mod gradcheck;
mod tape;

use thiserror::Error;

pub use array::NumArray;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{BinaryKind, Gradients, ReduceKind, Tape, UnaryKind, Var, NORM_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("degenerate input: vector norm {norm:e} is below {tol:e}")]
    Degenerate { norm: f64, tol: f64 },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
}
