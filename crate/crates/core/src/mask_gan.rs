//! Shape-mask generator and discriminator.
//!
//! The generator maps the box-cut background to a soft mask. All of its
//! hidden normalization layers are AdaIN layers whose affine parameters
//! are predicted from the box coordinates and the shape latent. A decoder
//! maps those parameters back to the latent; its reconstruction error keeps
//! the generator from ignoring the latent. The discriminator sees the mask
//! with the box raster, and its intermediate features are matched against
//! running means of real-mask features.

use std::collections::HashMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::{mix_seed, ExampleBatch};
use crate::domain::{cutout, BoundingBox, ImageTensor, LatentVector, MaskTensor};
use crate::error::{Result, StampError};
use crate::losses;
use crate::nn::{
    adain, coordinate_channels, leaky_relu, randn, scalar, sigmoid, upsample2x, Adam, AdamConfig, Conv2d,
    Linear, ParamStore,
};

const SLOPE: f64 = 0.2;
const TAG_Z: u64 = 0x4d5a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskGanConfig {
    pub size: usize,
    pub z_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub downsamples: usize,
    pub res_blocks: usize,
    /// Hidden width of the AdaIN parameter encoder and the latent decoder.
    pub hidden: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub ema_decay: f64,
    /// Divide the running mean by `1 - decay^n` when it is read.
    pub ema_bias_correction: bool,
    pub lambda_fm: f64,
    pub lambda_rec: f64,
    /// Reconstruct the latent from the generated mask instead of from the
    /// AdaIN parameters.
    pub mrecon: bool,
    /// Give the discriminator the box-cut background as well.
    pub bgcond: bool,
    pub adam: AdamConfig,
}

impl Default for MaskGanConfig {
    fn default() -> Self {
        Self {
            size: 64,
            z_dim: 128,
            base_channels: 8,
            max_channels: 32,
            downsamples: 3,
            res_blocks: 4,
            hidden: 128,
            disc_channels: 16,
            disc_layers: 3,
            ema_decay: 0.999,
            ema_bias_correction: true,
            lambda_fm: 10.0,
            lambda_rec: 10.0,
            mrecon: false,
            bgcond: false,
            adam: AdamConfig::default(),
        }
    }
}

impl MaskGanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StampError::Config(m));
        if self.z_dim == 0 || self.base_channels == 0 || self.hidden == 0 || self.disc_layers == 0 {
            return bad("mask model dimensions must be positive".into());
        }
        if self.size % (1 << self.downsamples) != 0 || self.size >> self.downsamples < 2 {
            return bad(format!("size {} incompatible with {} downsamples", self.size, self.downsamples));
        }
        if self.size >> self.disc_layers < 1 {
            return bad(format!("size {} too small for {} discriminator layers", self.size, self.disc_layers));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0, 1)", self.ema_decay));
        }
        if self.lambda_fm < 0.0 || self.lambda_rec < 0.0 || !self.lambda_fm.is_finite() || !self.lambda_rec.is_finite() {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels.max(self.base_channels))
    }

    fn disc_in_channels(&self) -> usize {
        if self.bgcond {
            5
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskLossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub rec: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl MaskLossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.fm, self.rec, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted generator objective, evaluated in `f64`.
pub fn mask_total_g(adv_g: f64, fm: f64, rec: f64, lambda_fm: f64, lambda_rec: f64) -> f64 {
    adv_g + lambda_fm * fm + lambda_rec * rec
}

#[derive(Debug, Clone)]
struct MaskGenerator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    /// `up[k]` produces level-`k` features from level `k + 1`.
    up: Vec<Conv2d>,
    head: Conv2d,
    adain_channels: Vec<usize>,
}

impl MaskGenerator {
    fn new(store: &mut ParamStore, cfg: &MaskGanConfig) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp("gen");
        let mut adain_channels = Vec::new();
        let stem = Conv2d::new(&mut b.pp("stem"), 5, cfg.channels(0), 3, 1, 1)?;
        adain_channels.push(cfg.channels(0));
        let mut down = Vec::new();
        for k in 1..=cfg.downsamples {
            down.push(Conv2d::new(&mut b.pp(format!("down{k}")), cfg.channels(k - 1), cfg.channels(k), 4, 2, 1)?);
            adain_channels.push(cfg.channels(k));
        }
        let deep = cfg.channels(cfg.downsamples);
        let mut res = Vec::new();
        for r in 0..cfg.res_blocks {
            let mut rb = b.pp(format!("res{r}"));
            res.push((
                Conv2d::new(&mut rb.pp("a"), deep, deep, 3, 1, 1)?,
                Conv2d::new(&mut rb.pp("b"), deep, deep, 3, 1, 1)?,
            ));
            adain_channels.extend([deep, deep]);
        }
        let mut up = Vec::new();
        for k in 0..cfg.downsamples {
            up.push(Conv2d::new(&mut b.pp(format!("up{k}")), cfg.channels(k + 1) + cfg.channels(k), cfg.channels(k), 3, 1, 1)?);
        }
        // decoder AdaIN layers run from the deepest level up
        for k in (0..cfg.downsamples).rev() {
            adain_channels.push(cfg.channels(k));
        }
        let head = Conv2d::new(&mut b.pp("head"), cfg.channels(0), 1, 3, 1, 1)?;
        Ok(Self { stem, down, res, up, head, adain_channels })
    }

    fn adain_param_count(&self) -> usize {
        self.adain_channels.iter().map(|c| 2 * c).sum()
    }

    /// `i_b: (B, 3, H, W)`, `params: (B, P)` -> logits `(B, 1, H, W)`.
    fn forward(&self, i_b: &Tensor, params: &Tensor) -> Result<Tensor> {
        let (batch, _, h, w) = i_b.dims4()?;
        let mut offset = 0;
        let mut layer = 0;
        let mut norm = |x: &Tensor| -> Result<Tensor> {
            let c = self.adain_channels[layer];
            let p = params.narrow(1, offset, 2 * c)?;
            offset += 2 * c;
            layer += 1;
            adain(x, &p)
        };
        let input = Tensor::cat(&[i_b, &coordinate_channels(batch, h, w, i_b)?], 1)?;
        let mut x = leaky_relu(&norm(&self.stem.forward(&input)?)?, SLOPE)?;
        let mut skips = vec![x.clone()];
        for conv in &self.down {
            x = leaky_relu(&norm(&conv.forward(&x)?)?, SLOPE)?;
            skips.push(x.clone());
        }
        for (a, b) in &self.res {
            let r = leaky_relu(&norm(&a.forward(&x)?)?, SLOPE)?;
            let r = norm(&b.forward(&r)?)?;
            x = (x + r)?;
        }
        for k in (0..self.up.len()).rev() {
            let merged = Tensor::cat(&[&upsample2x(&x)?, &skips[k]], 1)?;
            x = leaky_relu(&norm(&self.up[k].forward(&merged)?)?, SLOPE)?;
        }
        self.head.forward(&x)
    }
}

/// Two-layer perceptron with a leaky-ReLU hidden layer.
#[derive(Debug, Clone)]
struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, out_std: f64) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp(name);
        Ok(Self {
            first: Linear::new(&mut b.pp("fc1"), input, hidden)?,
            second: Linear::with_std(&mut b.pp("fc2"), hidden, output, out_std)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&leaky_relu(&self.first.forward(x)?, SLOPE)?)
    }

    fn detached(&self) -> Self {
        Self { first: self.first.detached(), second: self.second.detached() }
    }
}

/// Convolutional latent regressor used by the `mrecon` ablation.
#[derive(Debug, Clone)]
struct MaskLatentEncoder {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl MaskLatentEncoder {
    fn new(store: &mut ParamStore, cfg: &MaskGanConfig) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp("mask_enc");
        let c = cfg.base_channels;
        let convs = vec![
            Conv2d::new(&mut b.pp("conv0"), 1, c, 4, 2, 1)?,
            Conv2d::new(&mut b.pp("conv1"), c, 2 * c, 4, 2, 1)?,
        ];
        let fc = Linear::new(&mut b.pp("fc"), 2 * c, cfg.z_dim)?;
        Ok(Self { convs, fc })
    }

    fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let mut x = m.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, SLOPE)?;
        }
        self.fc.forward(&x.flatten_from(2)?.mean(D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    /// `depth` stride-2 layers. With `full_res_stem` a stride-1 layer runs
    /// first, so the input is also judged at full resolution.
    pub fn new(store: &mut ParamStore, in_channels: usize, base: usize, depth: usize, full_res_stem: bool) -> Result<Self> {
        let mut root = store.root();
        let mut b = root.pp("disc");
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        if full_res_stem {
            layers.push(Conv2d::new(&mut b.pp("stem"), c_in, base, 3, 1, 1)?);
            c_in = base;
        }
        for l in 0..depth {
            let c_out = base << l;
            layers.push(Conv2d::new(&mut b.pp(format!("conv{l}")), c_in, c_out, 4, 2, 1)?);
            c_in = c_out;
        }
        let head = Conv2d::new(&mut b.pp("head"), c_in, 1, 3, 1, 1)?;
        Ok(Self { layers, head })
    }

    /// Per-sample scores `(B,)` and the activations of every hidden layer.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for conv in &self.layers {
            h = leaky_relu(&conv.forward(&h)?, SLOPE)?;
            feats.push(h.clone());
        }
        let score = self.head.forward(&h)?.flatten_from(1)?.mean(D::Minus1)?;
        Ok((score, feats))
    }

    pub fn detached(&self) -> Self {
        Self { layers: self.layers.iter().map(Conv2d::detached).collect(), head: self.head.detached() }
    }
}

/// Running mean of real-sample discriminator features, one full feature
/// map per layer averaged over the batch axis.
#[derive(Debug, Clone)]
pub struct FeatureEma {
    decay: f64,
    bias_correction: bool,
    values: Vec<Tensor>,
    updates: u64,
}

impl FeatureEma {
    pub fn new(decay: f64, bias_correction: bool) -> Self {
        Self { decay, bias_correction, values: Vec::new(), updates: 0 }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Raw running means, starting from zero.
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// `ema <- decay * ema + (1 - decay) * batch_mean(feats)`.
    pub fn update(&mut self, feats: &[Tensor]) -> Result<()> {
        let means = feats
            .iter()
            .map(|f| Ok(f.detach().mean(0)?))
            .collect::<Result<Vec<_>>>()?;
        if self.values.is_empty() {
            self.values = means.iter().map(Tensor::zeros_like).collect::<candle_core::Result<_>>()?;
        }
        if means.len() != self.values.len() {
            return Err(StampError::Dimension(format!(
                "{} feature layers for a running mean over {}",
                means.len(),
                self.values.len()
            )));
        }
        for (v, m) in self.values.iter_mut().zip(means) {
            if v.shape() != m.shape() {
                return Err(StampError::Dimension(format!("feature {:?} vs running mean {:?}", m.shape(), v.shape())));
            }
            *v = ((&*v * self.decay)? + (m * (1.0 - self.decay))?)?;
        }
        self.updates += 1;
        Ok(())
    }

    /// The values the feature-matching loss compares against.
    pub fn targets(&self) -> Result<Vec<Tensor>> {
        if self.updates == 0 {
            return Err(StampError::UninitializedEma);
        }
        if !self.bias_correction {
            return Ok(self.values.clone());
        }
        let correction = 1.0 - self.decay.powi(self.updates.min(i32::MAX as u64) as i32);
        Ok(self
            .values
            .iter()
            .map(|v| v / correction)
            .collect::<candle_core::Result<_>>()?)
    }

    /// Feature-matching loss of fake features against [`Self::targets`].
    pub fn loss(&self, fake: &[Tensor]) -> Result<Tensor> {
        losses::moving_average_feature_matching(fake, &self.targets()?)
    }

    pub(crate) fn state(&self) -> (Vec<Tensor>, u64) {
        (self.values.clone(), self.updates)
    }

    pub(crate) fn restore(&mut self, values: Vec<Tensor>, updates: u64) {
        self.values = values;
        self.updates = updates;
    }
}

/// Generator-side networks, their discriminator, the feature running mean
/// and optimizer state for one object class.
#[derive(Debug)]
pub struct MaskGan {
    pub config: MaskGanConfig,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    generator: MaskGenerator,
    encoder: Mlp,
    decoder: Option<Mlp>,
    mask_encoder: Option<MaskLatentEncoder>,
    disc: Discriminator,
    pub ema: FeatureEma,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

/// Intermediate tensors of one generator forward pass.
pub struct MaskForward {
    pub z: Tensor,
    pub adain_params: Tensor,
    pub logits: Tensor,
    pub mask: Tensor,
}

impl MaskGan {
    pub fn new(config: MaskGanConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut gen_params = ParamStore::new(mix_seed(seed, &[1]), dtype, device);
        let mut disc_params = ParamStore::new(mix_seed(seed, &[2]), dtype, device);
        let generator = MaskGenerator::new(&mut gen_params, &config)?;
        let p = generator.adain_param_count();
        let encoder = Mlp::new(&mut gen_params, "adain_enc", 4 + config.z_dim, config.hidden, p, 0.5 / (config.hidden as f64).sqrt())?;
        let (decoder, mask_encoder) = if config.mrecon {
            (None, Some(MaskLatentEncoder::new(&mut gen_params, &config)?))
        } else {
            (Some(Mlp::new(&mut gen_params, "latent_dec", p, config.hidden, config.z_dim, (1.0 / config.hidden as f64).sqrt())?), None)
        };
        let disc = Discriminator::new(&mut disc_params, config.disc_in_channels(), config.disc_channels, config.disc_layers, true)?;
        Ok(Self {
            ema: FeatureEma::new(config.ema_decay, config.ema_bias_correction),
            opt_g: Adam::new(config.adam),
            opt_d: Adam::new(config.adam),
            config,
            gen_params,
            disc_params,
            generator,
            encoder,
            decoder,
            mask_encoder,
            disc,
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_params.device()
    }

    pub fn adain_param_count(&self) -> usize {
        self.generator.adain_param_count()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// AdaIN parameters predicted from box coordinates `(B, 4)` and latents `(B, z)`.
    pub fn encode_adain(&self, bbox_vec: &Tensor, z: &Tensor) -> Result<Tensor> {
        if z.dims2()?.1 != self.config.z_dim {
            return Err(StampError::Config(format!("shape latent has {} dims, model expects {}", z.dims2()?.1, self.config.z_dim)));
        }
        self.encoder.forward(&Tensor::cat(&[bbox_vec, z], 1)?)
    }

    /// Full generator pass on a batch of box-cut images.
    pub fn forward(&self, i_b: &Tensor, bbox_vec: &Tensor, z: &Tensor) -> Result<MaskForward> {
        let adain_params = self.encode_adain(bbox_vec, z)?;
        let logits = self.generator.forward(i_b, &adain_params)?;
        let mask = sigmoid(&logits)?;
        Ok(MaskForward { z: z.clone(), adain_params, logits, mask })
    }

    /// Soft mask in `[0, 1]` for one box-cut image.
    pub fn gen_mask(&self, i_b: &ImageTensor, z: &LatentVector, b: &BoundingBox) -> Result<MaskTensor> {
        if z.dim() != self.config.z_dim {
            return Err(StampError::Config(format!("shape latent has {} dims, model expects {}", z.dim(), self.config.z_dim)));
        }
        if i_b.height() != self.config.size || i_b.width() != self.config.size {
            return Err(StampError::Dimension(format!(
                "image is {}x{}, model resolution is {}",
                i_b.height(),
                i_b.width(),
                self.config.size
            )));
        }
        let (dtype, dev) = (self.dtype(), self.device().clone());
        let bvec = Tensor::from_vec(b.vec().to_vec(), (1, 4), &dev)?.to_dtype(dtype)?;
        let out = self.forward(&i_b.to_tensor(dtype, &dev)?, &bvec, &z.to_tensor(dtype, &dev)?)?;
        MaskTensor::from_tensor(&out.mask.detach())
    }

    /// Convenience wrapper: cuts the box out of `background` first.
    pub fn gen_mask_for_background(&self, background: &ImageTensor, z: &LatentVector, b: &BoundingBox) -> Result<MaskTensor> {
        self.gen_mask(&cutout(background, b.raster())?, z, b)
    }

    fn disc_input(&self, mask: &Tensor, batch: &ExampleBatch) -> Result<Tensor> {
        let mut parts = vec![mask.clone(), batch.bbox_raster.clone()];
        if self.config.bgcond {
            parts.push(batch.image_bbox_cut.clone());
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Discriminator scores and features for real masks.
    pub fn real_features(&self, batch: &ExampleBatch) -> Result<Vec<Tensor>> {
        Ok(self.disc.forward(&self.disc_input(&batch.mask, batch)?)?.1)
    }

    /// Latent reconstruction loss for one forward pass.
    pub fn rec_loss(&self, fwd: &MaskForward) -> Result<Tensor> {
        let z_hat = match (&self.decoder, &self.mask_encoder) {
            (Some(dec), _) => dec.forward(&fwd.adain_params)?,
            (None, Some(enc)) => enc.forward(&fwd.mask)?,
            (None, None) => unreachable!("one latent head always exists"),
        };
        losses::latent_l1(&fwd.z, &z_hat)
    }

    /// Generator objective against a frozen copy of the discriminator and
    /// the current feature running mean. Returns the differentiable total
    /// and its parts.
    pub fn generator_objective(&self, batch: &ExampleBatch, fwd: &MaskForward) -> Result<(Tensor, MaskLossBreakdown)> {
        let disc = self.disc.detached();
        let (score, feats) = disc.forward(&self.disc_input(&fwd.mask, batch)?)?;
        let adv = losses::hinge_g_loss(&score)?;
        let fm = self.ema.loss(&feats)?;
        let rec = self.rec_loss(fwd)?;
        let (lf, lr) = (self.config.lambda_fm, self.config.lambda_rec);
        let total = ((&adv + (&fm * lf)?)? + (&rec * lr)?)?;
        let (adv_g, fm, rec) = (scalar(&adv)?, scalar(&fm)?, scalar(&rec)?);
        let breakdown = MaskLossBreakdown {
            adv_g,
            fm,
            rec,
            total_g: mask_total_g(adv_g, fm, rec, lf, lr),
            ..Default::default()
        };
        Ok((total, breakdown))
    }

    /// Latents for one training step, derived from `(seed, step)`.
    pub fn step_latents(&self, batch_size: usize, seed: u64, step: u64) -> Result<Tensor> {
        randn(mix_seed(seed, &[TAG_Z, step]), &[batch_size, self.config.z_dim], self.dtype(), self.device())
    }

    /// One discriminator update followed by one generator update against
    /// the updated discriminator.
    pub fn train_step(&mut self, batch: &ExampleBatch, seed: u64, step: u64) -> Result<MaskLossBreakdown> {
        let z = self.step_latents(batch.len(), seed, step)?;
        let fwd = self.forward(&batch.image_bbox_cut, &batch.bbox_vec, &z)?;

        // discriminator: real and fake in one pass
        let n = batch.len();
        let inputs = Tensor::cat(
            &[&self.disc_input(&batch.mask, batch)?, &self.disc_input(&fwd.mask.detach(), batch)?],
            0,
        )?;
        let (scores, feats) = self.disc.forward(&inputs)?;
        let d_loss = losses::hinge_d_loss(&scores.narrow(0, 0, n)?, &scores.narrow(0, n, n)?)?;
        let real_feats: Vec<Tensor> = feats.iter().map(|f| f.narrow(0, 0, n).map(|t| t.detach())).collect::<candle_core::Result<_>>()?;
        let adv_d = scalar(&d_loss)?;
        if !adv_d.is_finite() {
            return Err(StampError::MaskDivergence(Box::new(MaskLossBreakdown { adv_d, total_d: adv_d, ..Default::default() })));
        }
        self.opt_d.step(&self.disc_params, &d_loss.backward()?)?;

        // first step seeds the running mean before it is read
        let seeded_now = !self.ema.is_initialized();
        if seeded_now {
            self.ema.update(&real_feats)?;
        }
        let (total, mut breakdown) = self.generator_objective(batch, &fwd)?;
        breakdown.adv_d = adv_d;
        breakdown.total_d = adv_d;
        if !breakdown.is_finite() {
            return Err(StampError::MaskDivergence(Box::new(breakdown)));
        }
        self.opt_g.step(&self.gen_params, &total.backward()?)?;
        if !seeded_now {
            self.ema.update(&real_feats)?;
        }
        Ok(breakdown)
    }

    /// Applies externally computed generator gradients (joint stage).
    pub fn apply_generator_grads(&mut self, grads: &GradStore) -> Result<()> {
        self.opt_g.step(&self.gen_params, grads)
    }

    /// All tensors that make up the model state, keyed for a checkpoint.
    pub fn state_tensors(&self) -> (HashMap<String, Tensor>, HashMap<String, u64>) {
        let mut out = HashMap::new();
        for (k, v) in self.gen_params.tensors() {
            out.insert(format!("params.g.{k}"), v);
        }
        for (k, v) in self.disc_params.tensors() {
            out.insert(format!("params.d.{k}"), v);
        }
        let (ema, updates) = self.ema.state();
        for (l, v) in ema.into_iter().enumerate() {
            out.insert(format!("ema.{l}"), v);
        }
        let mut counters = HashMap::new();
        counters.insert("ema.updates".to_string(), updates);
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
        let layers = strip("ema.");
        let values = (0..layers.len())
            .map(|l| {
                layers
                    .get(&l.to_string())
                    .cloned()
                    .ok_or_else(|| StampError::Checkpoint(format!("missing running mean layer {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let updates = counters.get("ema.updates").copied().unwrap_or(0);
        self.ema.restore(values, updates);
        for (prefix, target) in [("adam.g.", &mut self.opt_g), ("adam.d.", &mut self.opt_d)] {
            let steps: HashMap<String, u64> = counters
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
                .collect();
            *target = Adam::restore(target.config, &strip(prefix), &steps)?;
        }
        Ok(())
    }

    /// Central-difference directional derivative of the AdaIN parameter
    /// encoder with respect to the latent.
    pub fn encoder_jvp(&self, bbox_vec: &Tensor, z: &Tensor, direction: &Tensor, eps: f64) -> Result<Tensor> {
        let enc = self.encoder.detached();
        let plus = enc.forward(&Tensor::cat(&[bbox_vec, &(z + (direction * eps)?)?], 1)?)?;
        let minus = enc.forward(&Tensor::cat(&[bbox_vec, &(z - (direction * eps)?)?], 1)?)?;
        Ok(((plus - minus)? / (2.0 * eps))?)
    }
}
