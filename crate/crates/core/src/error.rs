//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum MipError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer index {index} outside [1, {num_layers}]")]
    LayerIndex { index: usize, num_layers: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sampler contract violated: {0}")]
    SamplerContract(String),

    #[error("insufficient images: {0}")]
    InsufficientImages(String),

    #[error("empty gallery for protocol {0}")]
    EmptyGallery(String),

    #[error("query {0} has no positive match in the gallery")]
    NoPositive(usize),

    #[error("zero-norm feature vector at index {0}")]
    ZeroVector(usize),

    #[error("missing classifier for layer {0}; enable the instance-prompt loss heads")]
    MissingClassifier(usize),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint config hash mismatch: expected {expected}, found {found} (pass --force to override)")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, MipError>;
