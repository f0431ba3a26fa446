//! Layer primitives used by the generators, discriminators and encoders.

use candle_core::{Tensor, D};

use super::im2col::conv2d;
use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(
        b: &mut Builder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let weight = b.param("weight", &[out_c, in_c, kernel, kernel], Init::Normal((2.0 / fan_in).sqrt()))?;
        let bias = Some(b.param("bias", &[out_c], Init::Zeros)?);
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
            None => y,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            ..*self
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, in_f: usize, out_f: usize) -> Result<Self> {
        Self::with_std(b, in_f, out_f, (1.0 / in_f as f64).sqrt())
    }

    pub fn with_std(b: &mut Builder, in_f: usize, out_f: usize, std: f64) -> Result<Self> {
        let weight = b.param("weight", &[in_f, out_f], Init::Normal(std))?;
        let bias = b.param("bias", &[out_f], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// `x: (B, in) -> (B, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn detached(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach() }
    }
}

/// Learned per-channel scale applied to externally supplied unit noise.
#[derive(Debug, Clone)]
pub struct NoiseInjection {
    scale: Tensor,
}

impl NoiseInjection {
    pub fn new(b: &mut Builder, channels: usize, initial_scale: f64) -> Result<Self> {
        Ok(Self { scale: b.param("scale", &[channels], Init::Const(initial_scale))? })
    }

    /// `x + scale[c] * noise`, with `noise: (B, 1, H, W)` shared across channels.
    pub fn forward(&self, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let c = self.scale.elem_count();
        let scaled = noise.broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?;
        Ok((x + scaled)?)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Instance norm followed by a per-sample affine map. `params: (B, 2C)`
/// holds `[scale_offset | shift]`; the effective scale is `1 + scale_offset`.
pub fn adain(x: &Tensor, params: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let scale = (params.narrow(1, 0, c)? + 1.0)?.reshape((b, c, 1, 1))?;
    let shift = params.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
    Ok(instance_norm(x)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

/// Instance norm with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl InstanceNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Const(1.0))?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.elem_count();
        Ok(instance_norm(x)?
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Logistic function written through `tanh` so that neither tail overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Broadcasts `z: (B, n)` to a `(B, n, H, W)` feature map.
pub fn tile_latent(z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n) = z.dims2()?;
    Ok(z.reshape((b, n, 1, 1))?.broadcast_as((b, n, h, w))?.contiguous()?)
}

/// Two fixed channels holding normalized x and y pixel coordinates in `[-1, 1]`.
pub fn coordinate_channels(batch: usize, h: usize, w: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        for x in 0..w {
            data.push((2.0 * x as f64 + 1.0) / w as f64 - 1.0);
        }
    }
    for y in 0..h {
        for _ in 0..w {
            data.push((2.0 * y as f64 + 1.0) / h as f64 - 1.0);
        }
    }
    let t = Tensor::from_vec(data, (1, 2, h, w), like.device())?.to_dtype(like.dtype())?;
    Ok(t.broadcast_as((batch, 2, h, w))?.contiguous()?)
}
