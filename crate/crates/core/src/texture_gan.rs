//! Texture generator, encoder and discriminator.
//!
//! The generator inpaints the masked-out region given the cut image, the
//! mask and a texture latent tiled at the bottleneck. Each decoder stage
//! adds per-pixel Gaussian noise scaled by a learned per-channel factor.
//! Training runs two branches: a random latent composited with the
//! generator's own mask, and an encoded latent (from the ground-truth
//! foreground) composited with the ground-truth mask.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{backprop::GradStore, DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::{mix_seed, ExampleBatch};
use crate::domain::{ImageTensor, LatentVector, MaskTensor};
use crate::error::{Result, StampError};
use crate::features::{ExtractorSpec, Perceptual};
use crate::losses;
use crate::mask_gan::Discriminator;
use crate::nn::{
    leaky_relu, randn, scalar, tile_latent, upsample2x, Adam, AdamConfig, Conv2d, InstanceNorm, Linear,
    NoiseInjection, ParamStore,
};

const SLOPE: f64 = 0.2;
const TAG_Z: u64 = 0x545a;
const TAG_EPS: u64 = 0x5445;
const TAG_NOISE: u64 = 0x544e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureGanConfig {
    pub size: usize,
    pub z_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub downsamples: usize,
    pub res_blocks: usize,
    pub enc_channels: usize,
    pub enc_layers: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
    /// Decoder noise injection.
    pub noise: bool,
    pub noise_init: f64,
    /// Encoded-latent branch and its latent regularizers.
    pub bicycle: bool,
    pub logvar_clamp: f64,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_fm: f64,
    pub lambda_per: f64,
    pub lambda_irec: f64,
    pub phi: ExtractorSpec,
    /// 1-based stage of the perceptual network whose output is compared.
    pub phi_tap: usize,
    pub adam: AdamConfig,
}

impl Default for TextureGanConfig {
    fn default() -> Self {
        Self {
            size: 64,
            z_dim: 8,
            base_channels: 16,
            max_channels: 64,
            downsamples: 3,
            res_blocks: 2,
            enc_channels: 16,
            enc_layers: 3,
            disc_channels: 16,
            disc_layers: 3,
            noise: true,
            noise_init: 0.1,
            bicycle: true,
            logvar_clamp: 10.0,
            lambda_rec: 10.0,
            lambda_kl: 0.05,
            lambda_fm: 10.0,
            lambda_per: 10.0,
            lambda_irec: 10.0,
            phi: ExtractorSpec::Random { seed: 0x9e37 },
            phi_tap: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl TextureGanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StampError::Config(m));
        if self.z_dim == 0 || self.base_channels == 0 || self.enc_channels == 0 || self.enc_layers == 0 || self.disc_layers == 0 {
            return bad("texture model dimensions must be positive".into());
        }
        if self.size % (1 << self.downsamples) != 0 || self.size >> self.downsamples < 2 {
            return bad(format!("size {} incompatible with {} downsamples", self.size, self.downsamples));
        }
        let lambdas = [self.lambda_rec, self.lambda_kl, self.lambda_fm, self.lambda_per, self.lambda_irec];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.logvar_clamp > 0.0) {
            return bad("log-variance clamp must be positive".into());
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }

    pub fn weights(&self) -> TextureWeights {
        TextureWeights {
            rec: self.lambda_rec,
            kl: self.lambda_kl,
            fm: self.lambda_fm,
            per: self.lambda_per,
            irec: self.lambda_irec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureWeights {
    pub rec: f64,
    pub kl: f64,
    pub fm: f64,
    pub per: f64,
    pub irec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextureLossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub rec: f64,
    pub kl: f64,
    pub fm: f64,
    pub per: f64,
    pub irec: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl TextureLossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.rec, self.kl, self.fm, self.per, self.irec, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted generator objective, evaluated in `f64`.
pub fn texture_total_g(adv_g: f64, rec: f64, kl: f64, fm: f64, per: f64, irec: f64, w: &TextureWeights) -> f64 {
    adv_g + w.rec * rec + w.kl * kl + w.fm * fm + w.per * per + w.irec * irec
}

/// Where decoder noise comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Fixed noise derived from a seed: repeated calls agree.
    Eval { seed: u64 },
    /// Fresh noise on every call.
    Train,
}

#[derive(Debug, Clone)]
struct TextureGenerator {
    stem: (Conv2d, InstanceNorm),
    down: Vec<(Conv2d, InstanceNorm)>,
    bottleneck: Conv2d,
    res: Vec<(Conv2d, InstanceNorm, Conv2d, InstanceNorm)>,
    up: Vec<(Conv2d, NoiseInjection, InstanceNorm)>,
    head: Conv2d,
}

impl TextureGenerator {
    fn new(store: &mut ParamStore, cfg: &TextureGanConfig) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp("gen");
        let c0 = cfg.channels(0);
        let stem = (Conv2d::new(&mut b.pp("stem"), 4, c0, 3, 1, 1)?, InstanceNorm::new(&mut b.pp("stem_norm"), c0)?);
        let mut down = Vec::new();
        for k in 1..=cfg.downsamples {
            let (ci, co) = (cfg.channels(k - 1), cfg.channels(k));
            down.push((
                Conv2d::new(&mut b.pp(format!("down{k}")), ci, co, 4, 2, 1)?,
                InstanceNorm::new(&mut b.pp(format!("down{k}_norm")), co)?,
            ));
        }
        let deep = cfg.channels(cfg.downsamples);
        let bottleneck = Conv2d::new(&mut b.pp("bottleneck"), deep + cfg.z_dim, deep, 3, 1, 1)?;
        let mut res = Vec::new();
        for r in 0..cfg.res_blocks {
            let mut rb = b.pp(format!("res{r}"));
            res.push((
                Conv2d::new(&mut rb.pp("a"), deep, deep, 3, 1, 1)?,
                InstanceNorm::new(&mut rb.pp("a_norm"), deep)?,
                Conv2d::new(&mut rb.pp("b"), deep, deep, 3, 1, 1)?,
                InstanceNorm::new(&mut rb.pp("b_norm"), deep)?,
            ));
        }
        let mut up = Vec::new();
        for k in 0..cfg.downsamples {
            let co = cfg.channels(k);
            up.push((
                Conv2d::new(&mut b.pp(format!("up{k}")), cfg.channels(k + 1) + co, co, 3, 1, 1)?,
                NoiseInjection::new(&mut b.pp(format!("up{k}_noise")), co, cfg.noise_init)?,
                InstanceNorm::new(&mut b.pp(format!("up{k}_norm")), co)?,
            ));
        }
        let head = Conv2d::new(&mut b.pp("head"), c0, 3, 3, 1, 1)?;
        Ok(Self { stem, down, bottleneck, res, up, head })
    }

    /// `input: (B, 4, H, W)` (cut image and mask), `z: (B, n)`;
    /// `noise[k]: (B, 1, H_k, W_k)` for decoder stage `k`, or `None`.
    fn forward(&self, input: &Tensor, z: &Tensor, noise: Option<&[Tensor]>) -> Result<Tensor> {
        let mut x = leaky_relu(&self.stem.1.forward(&self.stem.0.forward(input)?)?, SLOPE)?;
        let mut skips = vec![x.clone()];
        for (conv, norm) in &self.down {
            x = leaky_relu(&norm.forward(&conv.forward(&x)?)?, SLOPE)?;
            skips.push(x.clone());
        }
        let (_, _, h, w) = x.dims4()?;
        // no normalization here: a tiled latent is a per-channel constant
        // that instance norm would remove
        x = leaky_relu(&self.bottleneck.forward(&Tensor::cat(&[&x, &tile_latent(z, h, w)?], 1)?)?, SLOPE)?;
        for (a, an, b, bn) in &self.res {
            let r = leaky_relu(&an.forward(&a.forward(&x)?)?, SLOPE)?;
            x = (&x + bn.forward(&b.forward(&r)?)?)?;
        }
        for k in (0..self.up.len()).rev() {
            let (conv, inject, norm) = &self.up[k];
            let mut y = conv.forward(&Tensor::cat(&[&upsample2x(&x)?, &skips[k]], 1)?)?;
            if let Some(noise) = noise {
                y = inject.forward(&y, &noise[k])?;
            }
            x = leaky_relu(&norm.forward(&y)?, SLOPE)?;
        }
        Ok(self.head.forward(&x)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
struct TextureEncoder {
    convs: Vec<Conv2d>,
    mu: Linear,
    logvar: Linear,
}

impl TextureEncoder {
    fn new(store: &mut ParamStore, cfg: &TextureGanConfig) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp("enc");
        let mut convs = Vec::new();
        let mut c_in = 3;
        for l in 0..cfg.enc_layers {
            let c_out = cfg.enc_channels << l;
            convs.push(Conv2d::new(&mut b.pp(format!("conv{l}")), c_in, c_out, 4, 2, 1)?);
            c_in = c_out;
        }
        let mu = Linear::new(&mut b.pp("mu"), c_in, cfg.z_dim)?;
        let logvar = Linear::with_std(&mut b.pp("logvar"), c_in, cfg.z_dim, 0.1 / (c_in as f64).sqrt())?;
        Ok(Self { convs, mu, logvar })
    }

    fn forward(&self, s: &Tensor, clamp: f64) -> Result<(Tensor, Tensor)> {
        let mut x = s.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, SLOPE)?;
        }
        let pooled = x.flatten_from(2)?.mean(D::Minus1)?;
        let logvar = self.logvar.forward(&pooled)?.clamp(-clamp, clamp)?;
        Ok((self.mu.forward(&pooled)?, logvar))
    }

    fn detached(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::detached).collect(),
            mu: self.mu.detached(),
            logvar: self.logvar.detached(),
        }
    }
}

#[derive(Debug)]
pub struct TextureGan {
    pub config: TextureGanConfig,
    /// Generator and encoder parameters (one optimizer).
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    generator: TextureGenerator,
    encoder: TextureEncoder,
    disc: Discriminator,
    phi: Perceptual,
    pub opt_g: Adam,
    pub opt_d: Adam,
    train_calls: AtomicU64,
    seed: u64,
}

/// Tensors produced by the generator branches of one training step.
pub struct TextureForward {
    pub z_random: Tensor,
    pub mask_random: Tensor,
    pub composite_random: Option<Tensor>,
    pub texture_random: Option<Tensor>,
    pub mu: Option<Tensor>,
    pub logvar: Option<Tensor>,
    /// Composite of the reconstruction branch, paired with the ground-truth mask.
    pub composite_paired: Tensor,
}

pub fn composite_tensor(i: &Tensor, s: &Tensor, m: &Tensor) -> Result<Tensor> {
    Ok((i.broadcast_mul(&(1.0 - m)?)? + s.broadcast_mul(m)?)?)
}

impl TextureGan {
    pub fn new(config: TextureGanConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let phi = Perceptual::new(&config.phi, config.phi_tap, dtype, device)?;
        Self::with_phi(config, seed, phi, dtype, device)
    }

    /// Builds the model around a given perceptual network (used with tiny
    /// surrogates in tests).
    pub fn with_phi(config: TextureGanConfig, seed: u64, phi: Perceptual, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut gen_params = ParamStore::new(mix_seed(seed, &[3]), dtype, device);
        let mut disc_params = ParamStore::new(mix_seed(seed, &[4]), dtype, device);
        let generator = TextureGenerator::new(&mut gen_params, &config)?;
        let encoder = TextureEncoder::new(&mut gen_params, &config)?;
        let disc = Discriminator::new(&mut disc_params, 4, config.disc_channels, config.disc_layers, false)?;
        Ok(Self {
            opt_g: Adam::new(config.adam),
            opt_d: Adam::new(config.adam),
            config,
            gen_params,
            disc_params,
            generator,
            encoder,
            disc,
            phi,
            train_calls: AtomicU64::new(0),
            seed,
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_params.device()
    }

    pub fn phi(&self) -> &Perceptual {
        &self.phi
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// Names of the encoder's parameters.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.gen_params
            .vars()
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn noise_tensors(&self, batch: usize, seed: u64) -> Result<Option<Vec<Tensor>>> {
        if !self.config.noise {
            return Ok(None);
        }
        (0..self.config.downsamples)
            .map(|k| {
                let side = self.config.size >> k;
                randn(mix_seed(seed, &[TAG_NOISE, k as u64]), &[batch, 1, side, side], self.dtype(), self.device())
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let n = z.dims2()?.1;
        if n != self.config.z_dim {
            return Err(StampError::Config(format!("texture latent has {n} dims, model expects {}", self.config.z_dim)));
        }
        Ok(())
    }

    /// Raw generator pass. `i_masked: (B, 3, H, W)`, `mask: (B, 1, H, W)`.
    pub fn generate(&self, i_masked: &Tensor, mask: &Tensor, z: &Tensor, noise_seed: u64) -> Result<Tensor> {
        self.check_latent(z)?;
        let noise = self.noise_tensors(i_masked.dims4()?.0, noise_seed)?;
        self.generator.forward(&Tensor::cat(&[i_masked, mask], 1)?, z, noise.as_deref())
    }

    /// Texture for one cut image.
    pub fn gen_texture(&self, i_masked: &ImageTensor, mask: &MaskTensor, z: &LatentVector, mode: NoiseMode) -> Result<ImageTensor> {
        if z.dim() != self.config.z_dim {
            return Err(StampError::Config(format!("texture latent has {} dims, model expects {}", z.dim(), self.config.z_dim)));
        }
        let s = self.config.size;
        if i_masked.height() != s || i_masked.width() != s || mask.height() != s || mask.width() != s {
            return Err(StampError::Dimension(format!("inputs must be {s}x{s}")));
        }
        let seed = match mode {
            NoiseMode::Eval { seed } => seed,
            NoiseMode::Train => mix_seed(self.seed, &[self.train_calls.fetch_add(1, Ordering::Relaxed)]),
        };
        let (dt, dev) = (self.dtype(), self.device().clone());
        let out = self.generate(&i_masked.to_tensor(dt, &dev)?, &mask.to_tensor(dt, &dev)?, &z.to_tensor(dt, &dev)?, seed)?;
        ImageTensor::from_tensor(&out.detach())
    }

    /// `(mu, logvar)` for a batch of foreground images.
    pub fn encode(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encoder.forward(s, self.config.logvar_clamp)
    }

    /// Mean, log-variance and a reparametrized sample for one foreground.
    pub fn encode_texture(&self, s: &ImageTensor, eps_seed: u64) -> Result<(LatentVector, LatentVector, LatentVector)> {
        let (dt, dev) = (self.dtype(), self.device().clone());
        let (mu, logvar) = self.encode(&s.to_tensor(dt, &dev)?)?;
        let eps = randn(eps_seed, &[1, self.config.z_dim], dt, &dev)?;
        let z = reparametrize(&mu, &logvar, &eps)?;
        let vec = |t: &Tensor| -> Result<LatentVector> {
            LatentVector::new(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
        };
        Ok((vec(&mu)?, vec(&logvar)?, vec(&z)?))
    }

    /// Latent reconstruction loss: the encoder mean of the masked texture
    /// against the latent that produced it. The encoder is a frozen copy
    /// here, so this term never updates it.
    pub fn latent_rec_loss(&self, z: &Tensor, texture: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.encoder.detached().forward(&texture.broadcast_mul(mask)?, self.config.logvar_clamp)?;
        losses::latent_l1(z, &mu)
    }

    pub fn perceptual_loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        losses::mean_abs_diff(&self.phi.forward(real)?, &self.phi.forward(fake)?)
    }

    fn disc_input(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[image, mask], 1)?)
    }

    /// Discriminator scores for `(image, mask)` pairs.
    pub fn disc_scores(&self, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(self.disc.forward(&Self::disc_input(image, mask)?)?.0)
    }

    /// Generator branches for one step. `mask_hat` replaces the
    /// ground-truth mask in the random branch when given.
    pub fn forward_branches(&self, batch: &ExampleBatch, seed: u64, step: u64, mask_hat: Option<&Tensor>) -> Result<TextureForward> {
        let n = batch.len();
        let (dt, dev) = (self.dtype(), self.device().clone());
        let z_random = randn(mix_seed(seed, &[TAG_Z, step]), &[n, self.config.z_dim], dt, &dev)?;
        let mask_random = mask_hat.cloned().unwrap_or_else(|| batch.mask.clone());
        let noise_seed = |branch: u64| mix_seed(seed, &[TAG_NOISE, step, branch]);
        if !self.config.bicycle {
            let s = self.generate(&batch.image_mask_cut, &batch.mask, &z_random, noise_seed(1))?;
            return Ok(TextureForward {
                composite_paired: composite_tensor(&batch.image, &s, &batch.mask)?,
                z_random,
                mask_random,
                composite_random: None,
                texture_random: None,
                mu: None,
                logvar: None,
            });
        }
        let i_cut = batch.image.broadcast_mul(&(1.0 - &mask_random)?)?;
        let texture_random = self.generate(&i_cut, &mask_random, &z_random, noise_seed(0))?;
        let composite_random = composite_tensor(&batch.image, &texture_random, &mask_random)?;
        let (mu, logvar) = self.encode(&batch.foreground)?;
        let eps = randn(mix_seed(seed, &[TAG_EPS, step]), &[n, self.config.z_dim], dt, &dev)?;
        let z_enc = reparametrize(&mu, &logvar, &eps)?;
        let s = self.generate(&batch.image_mask_cut, &batch.mask, &z_enc, noise_seed(1))?;
        Ok(TextureForward {
            composite_paired: composite_tensor(&batch.image, &s, &batch.mask)?,
            z_random,
            mask_random,
            composite_random: Some(composite_random),
            texture_random: Some(texture_random),
            mu: Some(mu),
            logvar: Some(logvar),
        })
    }

    /// Generator objective against a frozen discriminator copy.
    pub fn generator_objective(&self, batch: &ExampleBatch, fwd: &TextureForward) -> Result<(Tensor, TextureLossBreakdown)> {
        let n = batch.len();
        let disc = self.disc.detached();
        let w = self.config.weights();
        let mut images = vec![batch.image.clone(), fwd.composite_paired.clone()];
        let mut masks = vec![batch.mask.clone(), batch.mask.clone()];
        if let Some(c) = &fwd.composite_random {
            images.push(c.clone());
            masks.push(fwd.mask_random.clone());
        }
        let (scores, feats) = disc.forward(&Self::disc_input(&Tensor::cat(&images, 0)?, &Tensor::cat(&masks, 0)?)?)?;
        let mut adv = losses::hinge_g_loss(&scores.narrow(0, n, n)?)?;
        if fwd.composite_random.is_some() {
            adv = (adv + losses::hinge_g_loss(&scores.narrow(0, 2 * n, n)?)?)?;
        }
        let real_feats: Vec<Tensor> = feats.iter().map(|f| f.narrow(0, 0, n).map(|t| t.detach())).collect::<candle_core::Result<_>>()?;
        let fake_feats: Vec<Tensor> = feats.iter().map(|f| f.narrow(0, n, n)).collect::<candle_core::Result<_>>()?;
        let fm = losses::paired_feature_matching(&fake_feats, &real_feats)?;
        let per = self.perceptual_loss(&batch.image, &fwd.composite_paired)?;
        let irec = losses::mean_abs_diff(&fwd.composite_paired, &batch.image)?;

        let mut total = ((&adv + (&fm * w.fm)?)? + ((&per * w.per)? + (&irec * w.irec)?)?)?;
        let (mut rec_v, mut kl_v) = (0.0, 0.0);
        if let (Some(tex), Some(mu), Some(logvar)) = (&fwd.texture_random, &fwd.mu, &fwd.logvar) {
            let rec = self.latent_rec_loss(&fwd.z_random, tex, &fwd.mask_random)?;
            let kl = losses::kl_standard_normal(mu, logvar)?;
            total = ((total + (&rec * w.rec)?)? + (&kl * w.kl)?)?;
            rec_v = scalar(&rec)?;
            kl_v = scalar(&kl)?;
        }
        let (adv_g, fm, per, irec) = (scalar(&adv)?, scalar(&fm)?, scalar(&per)?, scalar(&irec)?);
        let breakdown = TextureLossBreakdown {
            adv_g,
            rec: rec_v,
            kl: kl_v,
            fm,
            per,
            irec,
            total_g: texture_total_g(adv_g, rec_v, kl_v, fm, per, irec, &w),
            ..Default::default()
        };
        Ok((total, breakdown))
    }

    /// One discriminator update, then one generator/encoder update. The
    /// generator gradients are returned so a joint stage can route them
    /// into the mask generator too.
    pub fn train_step(&mut self, batch: &ExampleBatch, seed: u64, step: u64, mask_hat: Option<&Tensor>) -> Result<(TextureLossBreakdown, GradStore)> {
        let n = batch.len();
        let fwd = self.forward_branches(batch, seed, step, mask_hat)?;

        let mut images = vec![batch.image.clone(), fwd.composite_paired.detach()];
        let mut masks = vec![batch.mask.clone(), batch.mask.clone()];
        if let Some(c) = &fwd.composite_random {
            images.push(c.detach());
            masks.push(fwd.mask_random.detach());
        }
        let scores = self.disc_scores(&Tensor::cat(&images, 0)?, &Tensor::cat(&masks, 0)?)?;
        let real = scores.narrow(0, 0, n)?;
        let d_loss = match fwd.composite_random {
            Some(_) => losses::texture_adv(&real, &scores.narrow(0, 2 * n, n)?, &scores.narrow(0, n, n)?)?.1,
            None => losses::hinge_d_loss(&real, &scores.narrow(0, n, n)?)?,
        };
        let adv_d = scalar(&d_loss)?;
        if !adv_d.is_finite() {
            return Err(StampError::TextureDivergence(Box::new(TextureLossBreakdown { adv_d, total_d: adv_d, ..Default::default() })));
        }
        self.opt_d.step(&self.disc_params, &d_loss.backward()?)?;

        let (total, mut breakdown) = self.generator_objective(batch, &fwd)?;
        breakdown.adv_d = adv_d;
        breakdown.total_d = adv_d;
        if !breakdown.is_finite() {
            return Err(StampError::TextureDivergence(Box::new(breakdown)));
        }
        let grads = total.backward()?;
        self.opt_g.step(&self.gen_params, &grads)?;
        Ok((breakdown, grads))
    }

    pub fn state_tensors(&self) -> (HashMap<String, Tensor>, HashMap<String, u64>) {
        let mut out = HashMap::new();
        for (k, v) in self.gen_params.tensors() {
            out.insert(format!("params.g.{k}"), v);
        }
        for (k, v) in self.disc_params.tensors() {
            out.insert(format!("params.d.{k}"), v);
        }
        let mut counters = HashMap::new();
        for (prefix, opt) in [("adam.g", &self.opt_g), ("adam.d", &self.opt_d)] {
            let (t, steps) = opt.state();
            for (k, v) in t {
                out.insert(format!("{prefix}.{k}"), v);
            }
            for (k, v) in steps {
                counters.insert(format!("{prefix}.{k}"), v);
            }
        }
        (out, counters)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, counters: &HashMap<String, u64>) -> Result<()> {
        let strip = |prefix: &str| -> HashMap<String, Tensor> {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        self.gen_params.load(&strip("params.g."))?;
        self.disc_params.load(&strip("params.d."))?;
        for (prefix, target) in [("adam.g.", &mut self.opt_g), ("adam.d.", &mut self.opt_d)] {
            let steps: HashMap<String, u64> = counters
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
                .collect();
            *target = Adam::restore(target.config, &strip(prefix), &steps)?;
        }
        Ok(())
    }
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparametrize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mu + (logvar * 0.5)?.exp()?.mul(eps)?)?)
}
