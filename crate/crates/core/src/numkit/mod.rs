//! Dense tensors, a reverse-mode autodiff tape, and first-order optimizers.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradEntry, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var, NORM_GUARD};
pub use optim::{sgd_step, Adam, SgdConfig};
pub use tensor::{cholesky, forward_substitute, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("singular matrix in {op}")]
    Singular { op: &'static str },
    #[error("matrix not positive definite: {context}")]
    NotPositiveDefinite { context: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Glorot-uniform weight matrix, entries in ±√(6/(fan_in+fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], values)
}
