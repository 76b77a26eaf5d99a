//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a Wengert tape: [`Tape`] records each primitive application
//! in topological order during the forward pass; [`Tape::backward`] replays
//! the records once in reverse, accumulating adjoints by the chain rule.
//! Every primitive the message-passing model needs is provided directly,
//! including the segment (scatter/gather) operations used to route messages
//! along graph edges.
//!
//! All arithmetic is in f64. Any non-finite forward value is a hard error,
//! so a diverging training run fails at the op that produced it instead of
//! propagating NaNs.

mod tape;
mod tensor;

pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("backward: variable {0} is not on this tape")]
    NotOnTape(usize),
    #[error("backward: no gradient path from the loss to the requested leaves")]
    NoGradientPath,
    #[error("tensor: shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}
