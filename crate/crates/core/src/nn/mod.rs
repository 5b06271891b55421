//! Dense tensors, the 1-D CNN layers and their optimizers.

pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;

use thiserror::Error;

pub use model::{ClientCache, ClientGrads, ClientModel, LayerParams, LayerSpec, LinearLayer, ModelSpec, TrainConfig};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
}
