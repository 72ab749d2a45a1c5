//! Neural light interpolation for light-stage scans: a shared convolutional
//! encoder applied to neighboring one-light images, alias-free pooling of
//! their activations, and a decoder conditioned on the query direction.

pub mod config;
pub mod infer;
pub mod model;
pub mod ops;
pub mod params;
pub mod real;
pub mod train;
pub mod weights;

pub use config::{Ablation, ModelConfig};
pub use infer::{render_neural, EncodedScan, RenderMode};
pub use params::ModelParams;
pub use train::{train, TrainOptions, TrainOutput};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Core(#[from] lumisr_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;
