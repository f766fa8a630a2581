//! Small reverse-mode engine covering the layers the autoencoder uses.

mod adam;
mod gradcheck;
pub mod layers;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_STEP};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter {param} at index {index}")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("cosine distance of a zero-norm vector")]
    ZeroNorm,
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
