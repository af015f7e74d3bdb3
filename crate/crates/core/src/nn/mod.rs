//! Dense MLP kernel: forward pass with cached activations, exact reverse-mode
//! gradients, row-wise l2 normalization, AdamW, and a finite-difference
//! gradient checker. All arithmetic is `f64`.

mod gradcheck;
mod mlp;
mod optim;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use mlp::{
    backward, forward, l2_normalize, l2_normalize_backward, l2_normalize_rows, softplus, Dense,
    ForwardCache, Mlp, MlpGrads, MlpParams, MlpSpec, OutputActivation,
};
pub use optim::{adamw_step, AdamHyper, OptimizerState};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not belong to these parameters")]
    StaleCache,
    #[error("non-finite gradient {value} at flat index {index} (step {step})")]
    NonFiniteGradient { index: usize, value: f64, step: u64 },
    #[error("invalid network spec: {0}")]
    Spec(String),
}
