//! Small differentiable classifiers with hand-written reverse mode,
//! including the second-order pass the gradient-inversion attack needs.

mod grad;
mod network;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grad::{
    forward, loss, param_gradient, recon_loss, recon_loss_input_gradient, recon_objective, softmax,
    GradientView, ReconEval,
};
pub use network::{Activation, InputShape, LayerSpec, Network, NetworkSpec};
pub use params::{GradientBuffer, ParamSet, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("{what} has length {got}, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("target gradient has zero norm")]
    ZeroTarget,
    #[error("candidate gradient has zero norm; reconstruction similarity is undefined")]
    UndefinedSimilarity,
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// One labelled input, pixels flattened channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// In-memory labelled image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub shape: InputShape,
    pub classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            shape: self.shape,
            classes: self.classes,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}
