//! Feed-forward network with hand-written backpropagation.
//!
//! The network is a stack of [`LayerSpec`]s ending in exactly one head.
//! Everything lives in [`ModelState`]: parameters, batch-norm running
//! statistics, optimizer buffers and the train/eval mode. That value is the
//! unit that moves between institutions.

mod gradcheck;
mod init;
mod layer;
mod matrix;
mod model;
mod optim;

pub use gradcheck::grad_check;
pub use init::glorot_uniform;
pub use layer::{default_mlp, validate_specs, LayerKind, LayerSpec};
pub use matrix::Matrix;
pub use model::{
    cross_entropy, loss, Batch, Forward, Gradients, Mode, ModelState, BN_EPSILON, BN_MOMENTUM,
    PROB_CLAMP,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value encountered")]
    NonFinite,
}
