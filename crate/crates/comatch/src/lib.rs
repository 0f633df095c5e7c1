//! Jointly trained semantic matching and object co-segmentation.
//!
//! Given only image pairs that share an object category, the model learns
//! geometric transformations aligning each pair together with masks of the
//! common object. A transformation predictor and a mask decoder share an
//! encoder and are coupled during training by a cross-network consistency
//! loss; cycle and transitivity constraints regularize the transformations
//! and a perceptual contrastive loss separates figure from ground.
//!
//! The crate is desk-scale: small seeded convolutional stacks stand in for
//! pretrained backbones, and synthetic pairs with known ground truth replace
//! the benchmark datasets, so the full training loop runs on a CPU in
//! minutes. Everything is `f64` and deterministic given a seed.

pub mod autodiff;
pub mod correlation;
pub mod geometry;
pub mod gradcheck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod plot;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown transform kind `{0}` (expected affine, tps, or cascade)")]
    UnknownTransformKind(String),
    #[error("non-finite transform parameters")]
    NonFiniteParams,
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("resolution {h}x{w} not divisible by downsample factor {s}")]
    BadResolution { h: usize, w: usize, s: usize },
    #[error("empty keypoint set")]
    EmptyKeypoints,
    #[error("batch of {got} too small, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("manifest `{path}`: {msg}")]
    Manifest { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
