use thiserror::Error;

use crate::autodiff::TensorError;
use crate::features::FeatureError;
use crate::graph::GraphError;

/// Failure of a model forward pass, training step or rollout.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
