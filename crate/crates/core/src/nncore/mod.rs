//! Minimal float64 neural-network substrate: tensors, a fixed layer set with
//! explicit forward/backward passes, and SGD with cosine decay.

pub mod gradcheck;
mod layers;
pub(crate) mod linalg;
mod network;
mod optim;
mod params;
mod tensor;

pub use layers::{InputShape, LayerSpec};
pub use network::{argmax, Architecture, Mode, Network};
pub use optim::{sgd_step, OptimizerState};
pub use params::{ModelParams, ParamTensor};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch at {layer}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },
    #[error("backward called without a train-mode forward cache (at {layer})")]
    MissingForwardCache { layer: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
