//! Inference: shape then texture, and the operations built on them.

use std::path::Path;

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::domain::{
    apply_mask, binarize, composite, cutout, BoundingBox, ImageTensor, LatentVector, MaskTensor, StampResult,
};
use crate::error::{Result, StampError};
use crate::mask_gan::MaskGan;
use crate::texture_gan::{NoiseMode, TextureGan};

pub const MASK_THRESHOLD: f32 = 0.5;

/// Which latent an interpolation walks along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationAxis {
    Mask,
    Texture,
}

impl std::str::FromStr for InterpolationAxis {
    type Err = StampError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "texture" => Ok(Self::Texture),
            other => Err(StampError::InvalidValue(format!("unknown interpolation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureResult {
    pub texture: ImageTensor,
    pub composite: ImageTensor,
}

/// Standard-normal latent drawn from `seed`.
pub fn sample_latent(dim: usize, seed: u64) -> LatentVector {
    LatentVector::sample(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `k` evenly spaced blend weights from 0 to 1 inclusive.
pub fn alpha_grid(k: usize) -> Result<Vec<f32>> {
    if k < 2 {
        return Err(StampError::InvalidValue(format!("need at least 2 frames, got {k}")));
    }
    Ok((0..k).map(|i| if i == k - 1 { 1.0 } else { i as f32 / (k - 1) as f32 }).collect())
}

/// A trained mask model and texture model for one class.
pub struct StampModel {
    pub class: String,
    pub mask: MaskGan,
    pub texture: TextureGan,
    pub mask_meta: CheckpointMeta,
    pub texture_meta: CheckpointMeta,
}

impl StampModel {
    pub fn new(mask: MaskGan, texture: TextureGan, mask_meta: CheckpointMeta, texture_meta: CheckpointMeta) -> Result<Self> {
        if mask_meta.class != texture_meta.class {
            return Err(StampError::Checkpoint(format!(
                "mask model is for {:?}, texture model for {:?}",
                mask_meta.class, texture_meta.class
            )));
        }
        if mask.config.size != texture.config.size {
            return Err(StampError::Checkpoint(format!(
                "mask model runs at {} px, texture model at {} px",
                mask.config.size, texture.config.size
            )));
        }
        Ok(Self { class: mask_meta.class.clone(), mask, texture, mask_meta, texture_meta })
    }

    pub fn load(mask_path: &Path, texture_path: &Path, device: &Device) -> Result<Self> {
        let (mask, mask_meta) = checkpoint::load_mask(mask_path, device)?;
        let (texture, texture_meta) = checkpoint::load_texture(texture_path, device)?;
        Self::new(mask, texture, mask_meta, texture_meta)
    }

    pub fn size(&self) -> usize {
        self.mask.config.size
    }

    pub fn mask_z_dim(&self) -> usize {
        self.mask.config.z_dim
    }

    pub fn texture_z_dim(&self) -> usize {
        self.texture.config.z_dim
    }

    fn check_background(&self, background: &ImageTensor) -> Result<()> {
        let s = self.size();
        if background.height() != s || background.width() != s {
            return Err(StampError::Dimension(format!(
                "background is {}x{}, model resolution is {s}",
                background.height(),
                background.width()
            )));
        }
        Ok(())
    }

    /// Generates a shape inside `bbox`, textures it and pastes it onto
    /// `background`. The same inputs always give the same output.
    pub fn stamp(
        &self,
        background: &ImageTensor,
        bbox: [f32; 4],
        z_mask: &LatentVector,
        z_texture: &LatentVector,
        noise_seed: u64,
    ) -> Result<StampResult> {
        self.check_background(background)?;
        let b = BoundingBox::new(bbox, self.size(), self.size())?;
        let soft = self.mask.gen_mask(&cutout(background, b.raster())?, z_mask, &b)?;
        let mask = binarize(&soft, MASK_THRESHOLD)?;
        let TextureResult { texture, composite } = self.texture_with(background, &mask, z_texture, noise_seed)?;
        Ok(StampResult { mask, texture, composite, z_mask: z_mask.clone(), z_texture: z_texture.clone() })
    }

    fn texture_with(&self, background: &ImageTensor, mask: &MaskTensor, z: &LatentVector, noise_seed: u64) -> Result<TextureResult> {
        let texture = self.texture.gen_texture(&cutout(background, mask)?, mask, z, NoiseMode::Eval { seed: noise_seed })?;
        let composite = composite(background, &texture, mask)?;
        Ok(TextureResult { texture, composite })
    }

    /// Fills an existing mask with a new texture.
    pub fn retexture(&self, background: &ImageTensor, mask: &MaskTensor, z_texture: &LatentVector, noise_seed: u64) -> Result<TextureResult> {
        self.check_background(background)?;
        if mask.height() != self.size() || mask.width() != self.size() {
            return Err(StampError::Dimension(format!(
                "mask is {}x{}, model resolution is {}",
                mask.height(),
                mask.width(),
                self.size()
            )));
        }
        let mask = binarize(mask, MASK_THRESHOLD)?;
        if mask.count_nonzero() == 0 {
            return Err(StampError::EmptyMask);
        }
        self.texture_with(background, &mask, z_texture, noise_seed)
    }

    /// Texture latent of an existing object (the encoder mean).
    pub fn encode_texture(&self, image: &ImageTensor, mask: &MaskTensor) -> Result<LatentVector> {
        Ok(self.texture.encode_texture(&apply_mask(image, mask)?, 0)?.0)
    }

    /// `frames` stamps blending one latent from `a` to `b` while the other
    /// is held fixed. The first and last frames equal plain stamps with the
    /// endpoint latents.
    #[allow(clippy::too_many_arguments)]
    pub fn interpolate(
        &self,
        background: &ImageTensor,
        bbox: [f32; 4],
        axis: InterpolationAxis,
        a: &LatentVector,
        b: &LatentVector,
        fixed: &LatentVector,
        frames: usize,
        noise_seed: u64,
    ) -> Result<Vec<StampResult>> {
        alpha_grid(frames)?
            .into_iter()
            .map(|alpha| {
                let z = a.lerp(b, alpha)?;
                match axis {
                    InterpolationAxis::Mask => self.stamp(background, bbox, &z, fixed, noise_seed),
                    InterpolationAxis::Texture => self.stamp(background, bbox, fixed, &z, noise_seed),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        assert_eq!(alpha_grid(2).unwrap(), vec![0.0, 1.0]);
        let g = alpha_grid(9).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[1], 0.125);
        assert_eq!(g[8], 1.0);
        assert!(alpha_grid(1).is_err());
    }

    #[test]
    fn sampled_latents_repeat() {
        assert_eq!(sample_latent(8, 5), sample_latent(8, 5));
        assert_ne!(sample_latent(8, 5), sample_latent(8, 6));
    }
}
