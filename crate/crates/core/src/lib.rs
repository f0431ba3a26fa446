//! Two-stage object stamping: a conditional mask generator places a shape
//! inside a box, a texture generator fills it in, and the result is
//! composited onto the background.

pub mod checkpoint;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod imageio;
pub mod losses;
pub mod mask_gan;
pub mod nn;
pub mod pipeline;
pub mod texture_gan;
pub mod trainer;

pub use dataset::{Dataset, InstanceRecord};
pub use domain::{BoundingBox, ImageTensor, LatentVector, MaskTensor, StampResult};
pub use error::{Result, StampError};
pub use mask_gan::{MaskGan, MaskGanConfig};
pub use pipeline::StampModel;
pub use texture_gan::{TextureGan, TextureGanConfig};
pub use trainer::{train, Stage, TrainConfig};
