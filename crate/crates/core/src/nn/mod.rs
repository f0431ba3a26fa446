//! Minimal neural-network toolkit on top of `candle-core` autograd.

pub mod adam;
pub mod im2col;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use im2col::conv2d;
pub use layers::{
    adain, coordinate_channels, instance_norm, leaky_relu, sigmoid, tile_latent, upsample2x, Conv2d,
    InstanceNorm, Linear, NoiseInjection,
};
pub use params::{Builder, Init, ParamStore};

use candle_core::Tensor;

use crate::error::Result;

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Standard-normal tensor drawn from a ChaCha stream seeded with `seed`.
pub fn randn(seed: u64, shape: &[usize], dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}
