use thiserror::Error;

use crate::mask_gan::MaskLossBreakdown;
use crate::texture_gan::TextureLossBreakdown;

pub type Result<T, E = StampError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StampError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("feature moving average used before its first update")]
    UninitializedEma,
    #[error("mask training diverged: {0:?}")]
    MaskDivergence(Box<MaskLossBreakdown>),
    #[error("texture training diverged: {0:?}")]
    TextureDivergence(Box<TextureLossBreakdown>),
    #[error("need at least 2 samples per set, got {0}")]
    InsufficientSamples(usize),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
