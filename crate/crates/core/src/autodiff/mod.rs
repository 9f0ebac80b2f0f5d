//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations during a forward pass. Calling
//! [`Tape::backward`] replays the record in reverse, returning gradients for
//! every node and accumulating the gradients of parameter leaves into their
//! [`ParameterStore`] buffers. Accumulation adds; callers clear buffers with
//! [`ParameterStore::zero_grads`] between batches.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub(crate) use gradcheck::grad_check_params_with;
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use params::{Group, ParamId, Parameter, ParameterStore};
pub(crate) use tape::sigmoid;
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
