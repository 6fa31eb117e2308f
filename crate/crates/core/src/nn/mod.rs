//! Dense tensors with a tape-based reverse-mode autodiff, parameter storage,
//! optimizers and a finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, COORDINATE_LIMIT};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{glorot, he, uniform, Param, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::{matmul_into, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("loss must be a scalar, found shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

#[cfg(test)]
mod tests;
