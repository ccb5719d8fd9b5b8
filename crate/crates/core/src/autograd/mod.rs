//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node returns [`Gradients`], which trainable
//! [`Param`]s pull from with [`Param::accumulate`]. Accumulation adds to the
//! existing gradient; call [`Param::zero_grad`] to reset.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use gradcheck::grad_check;
pub use optim::{Adam, AdamConfig};
pub use tape::{CustomBackward, Gradients, Param, ParamKey, Tape, Var};
pub use tensor::{kernels, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable was recorded on a different tape")]
    ForeignTape,
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

#[cfg(test)]
mod tests;
