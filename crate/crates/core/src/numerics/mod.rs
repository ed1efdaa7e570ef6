//! Tensors, differentiable operations, Adam, and gradient checking.

mod adam;
pub mod grad_check;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad_check::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{cross_entropy, gelu, layer_norm, linear_forward, matmul, softmax};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DualValue, Real, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value in `{name}`: {detail}")]
    NonFinite { name: String, detail: String },
}
