//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; leaves created with
//! [`Tape::leaf`] receive gradients, leaves created with [`Tape::constant`]
//! do not. Models, losses and attacks are all written against this layer.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_difference_gradient, relative_error};
pub use tape::{sign, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_raw;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("function is not finite when probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
}
