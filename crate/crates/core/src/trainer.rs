//! Staged training driver: mask stage, texture stage, optional joint
//! fine-tuning. Handles the learning-rate schedule, ablation switches,
//! metrics output and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, meta_for, CheckpointMeta, ModelConfig};
use crate::dataset::{mix_seed, Dataset, DatasetTensors};
use crate::error::{Result, StampError};
use crate::features::ExtractorSpec;
use crate::mask_gan::{MaskGan, MaskGanConfig, MaskLossBreakdown};
use crate::nn::AdamConfig;
use crate::texture_gan::{TextureGan, TextureGanConfig, TextureLossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mask,
    Texture,
    Joint,
}

impl std::str::FromStr for Stage {
    type Err = StampError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "texture" => Ok(Self::Texture),
            "joint" => Ok(Self::Joint),
            other => Err(StampError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Which mask the random-latent texture branch is composited with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    Generated,
}

/// Flat training configuration, readable from a TOML key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Defaults to 1000 for the mask stage and 400 otherwise.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub mask_z_dim: usize,
    pub texture_z_dim: usize,
    pub mask_base_channels: usize,
    pub texture_base_channels: usize,
    pub lambda_mask_fm: f64,
    pub lambda_mask_rec: f64,
    pub lambda_texture_rec: f64,
    pub lambda_kl: f64,
    pub lambda_texture_fm: f64,
    pub lambda_per: f64,
    pub lambda_irec: f64,
    pub ema_decay: f64,
    pub ema_bias_correction: bool,
    pub no_fm: bool,
    pub no_noise: bool,
    pub no_bicycle: bool,
    pub no_vgg: bool,
    pub mrecon: bool,
    pub bgcond: bool,
    pub texture_masks: MaskSource,
    pub phi_seed: u64,
    pub phi_weights: Option<PathBuf>,
    pub phi_sha256: Option<String>,
    pub phi_tap: usize,
    /// Write an intermediate checkpoint every this many epochs (0: never).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps in total (a checkpoint is
    /// written at the stopping point).
    pub max_steps: Option<u64>,
    pub out_dir: PathBuf,
    /// Trained mask model, needed by the joint stage and by the texture
    /// stage with generated masks.
    pub mask_checkpoint: Option<PathBuf>,
    /// Trained texture model, needed by the joint stage.
    pub texture_checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Mask,
            epochs: None,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.99,
            seed: 0,
            mask_z_dim: 128,
            texture_z_dim: 8,
            mask_base_channels: 8,
            texture_base_channels: 16,
            lambda_mask_fm: 10.0,
            lambda_mask_rec: 10.0,
            lambda_texture_rec: 10.0,
            lambda_kl: 0.05,
            lambda_texture_fm: 10.0,
            lambda_per: 10.0,
            lambda_irec: 10.0,
            ema_decay: 0.999,
            ema_bias_correction: true,
            no_fm: false,
            no_noise: false,
            no_bicycle: false,
            no_vgg: false,
            mrecon: false,
            bgcond: false,
            texture_masks: MaskSource::GroundTruth,
            phi_seed: 0x9e37,
            phi_weights: None,
            phi_sha256: None,
            phi_tap: 3,
            checkpoint_every: 0,
            max_steps: None,
            out_dir: PathBuf::from("runs"),
            mask_checkpoint: None,
            texture_checkpoint: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Small-scale preset for a single CPU: 200 mask epochs or 100 texture
    /// epochs, and a narrower texture network.
    pub fn desk(stage: Stage) -> Self {
        Self {
            stage,
            epochs: Some(match stage {
                Stage::Mask => 200,
                Stage::Texture | Stage::Joint => 100,
            }),
            texture_base_channels: 8,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| StampError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.stage {
            Stage::Mask => 1000,
            Stage::Texture | Stage::Joint => 400,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_mask_fm,
            self.lambda_mask_rec,
            self.lambda_texture_rec,
            self.lambda_kl,
            self.lambda_texture_fm,
            self.lambda_per,
            self.lambda_irec,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(StampError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.total_epochs() == 0 {
            return Err(StampError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(StampError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(StampError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }

    pub fn phi_spec(&self) -> Result<ExtractorSpec> {
        match (&self.phi_weights, &self.phi_sha256) {
            (None, _) => Ok(ExtractorSpec::Random { seed: self.phi_seed }),
            (Some(p), Some(h)) => Ok(ExtractorSpec::File { path: p.display().to_string(), sha256: h.clone() }),
            (Some(_), None) => Err(StampError::Config("phi_weights needs phi_sha256".into())),
        }
    }

    /// Mask model configuration with the ablation switches applied.
    pub fn mask_config(&self, size: usize) -> MaskGanConfig {
        let fm_off = self.no_fm && self.stage == Stage::Mask;
        MaskGanConfig {
            size,
            z_dim: self.mask_z_dim,
            base_channels: self.mask_base_channels,
            max_channels: self.mask_base_channels * 4,
            lambda_fm: if fm_off { 0.0 } else { self.lambda_mask_fm },
            lambda_rec: self.lambda_mask_rec,
            ema_decay: self.ema_decay,
            ema_bias_correction: self.ema_bias_correction,
            mrecon: self.mrecon,
            bgcond: self.bgcond,
            adam: self.adam(),
            ..MaskGanConfig::default()
        }
    }

    /// Texture model configuration with the ablation switches applied.
    pub fn texture_config(&self, size: usize) -> Result<TextureGanConfig> {
        let fm_off = self.no_fm && self.stage != Stage::Mask;
        Ok(TextureGanConfig {
            size,
            z_dim: self.texture_z_dim,
            base_channels: self.texture_base_channels,
            max_channels: self.texture_base_channels * 4,
            enc_channels: self.texture_base_channels,
            noise: !self.no_noise,
            bicycle: !self.no_bicycle,
            lambda_rec: self.lambda_texture_rec,
            lambda_kl: self.lambda_kl,
            lambda_fm: if fm_off { 0.0 } else { self.lambda_texture_fm },
            lambda_per: if self.no_vgg { 0.0 } else { self.lambda_per },
            lambda_irec: self.lambda_irec,
            phi: self.phi_spec()?,
            phi_tap: self.phi_tap,
            adam: self.adam(),
            ..TextureGanConfig::default()
        })
    }
}

/// Base rate for the first half of training, then linear decay reaching 0
/// at `total`.
pub fn lr_at(epoch: usize, total: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total {
        return Err(StampError::InvalidValue(format!("epoch {epoch} outside 0..{total}")));
    }
    let half = total as f64 / 2.0;
    let e = epoch as f64;
    Ok(if e < half { base_lr } else { base_lr * (total as f64 - e) / (total as f64 - half) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Breakdown {
    Mask(MaskLossBreakdown),
    Texture(TextureLossBreakdown),
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: Breakdown,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final checkpoints written by this run (one per trained model).
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<StepRecord>,
    pub steps: u64,
}

enum Models {
    Mask(MaskGan),
    Texture { texture: TextureGan, masks: Option<MaskGan> },
    Joint { mask: MaskGan, texture: TextureGan },
}

struct Progress {
    step: u64,
    epoch: usize,
}

fn resume_meta(path: &Option<PathBuf>) -> Result<Option<Vec<u8>>> {
    path.as_ref().map(|p| Ok(std::fs::read(p)?)).transpose()
}

/// Runs one stage on `dataset`, writing metrics and checkpoints under
/// `config.out_dir`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(StampError::Dataset("empty training set".into()));
    }
    let device = Device::Cpu;
    let dtype = DType::F32;
    let size = dataset.size;
    let need_mask = config.stage == Stage::Joint
        || (config.stage == Stage::Texture && config.texture_masks == MaskSource::Generated);
    let mask_prereq = match (&config.mask_checkpoint, need_mask) {
        (Some(p), true) if p.exists() => Some(p.clone()),
        (_, true) => {
            return Err(StampError::StageOrder(format!(
                "{:?} stage needs a trained mask model (mask_checkpoint)",
                config.stage
            )))
        }
        (_, false) => None,
    };
    if config.stage == Stage::Joint && !config.texture_checkpoint.as_ref().is_some_and(|p| p.exists()) {
        return Err(StampError::StageOrder("joint stage needs a trained texture model (texture_checkpoint)".into()));
    }

    let resume = resume_meta(&config.resume)?;
    let mut progress = Progress { step: 0, epoch: 0 };
    let mut models = match config.stage {
        Stage::Mask => Models::Mask(match &resume {
            Some(bytes) => {
                let (m, meta) = checkpoint::mask_from_bytes(bytes, &device)?;
                progress = Progress { step: meta.step, epoch: meta.epoch };
                m
            }
            None => MaskGan::new(config.mask_config(size), mix_seed(config.seed, &[10]), dtype, &device)?,
        }),
        Stage::Texture => {
            let texture = match &resume {
                Some(bytes) => {
                    let (t, meta) = checkpoint::texture_from_bytes(bytes, &device)?;
                    progress = Progress { step: meta.step, epoch: meta.epoch };
                    t
                }
                None => TextureGan::new(config.texture_config(size)?, mix_seed(config.seed, &[11]), dtype, &device)?,
            };
            let masks = mask_prereq.as_deref().map(|p| checkpoint::load_mask(p, &device).map(|x| x.0)).transpose()?;
            Models::Texture { texture, masks }
        }
        Stage::Joint => {
            let (mask, texture) = match &resume {
                Some(_) => {
                    return Err(StampError::Config("resume the joint stage through mask_checkpoint and texture_checkpoint".into()))
                }
                None => (
                    checkpoint::load_mask(mask_prereq.as_deref().expect("checked"), &device)?.0,
                    checkpoint::load_texture(config.texture_checkpoint.as_deref().expect("checked"), &device)?.0,
                ),
            };
            Models::Joint { mask, texture }
        }
    };

    let data = DatasetTensors::new(&dataset.records, dtype, &device)?;
    let total_epochs = config.total_epochs();
    let batches_per_epoch = data.epoch_order(config.seed, 0, config.batch_size).len();
    if batches_per_epoch == 0 {
        return Err(StampError::Dataset(format!(
            "{} records cannot fill one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(config.out_dir.join("metrics.jsonl"))?;
    let dataset_hash = dataset.content_hash();
    let mut history = Vec::new();

    let start_epoch = (progress.step / batches_per_epoch as u64) as usize;
    let mut stopped = false;
    'epochs: for epoch in start_epoch..total_epochs {
        let lr = lr_at(epoch, total_epochs, config.lr)?;
        let order = data.epoch_order(config.seed, epoch, config.batch_size);
        let skip = (progress.step - (epoch * batches_per_epoch) as u64) as usize;
        for indices in order.iter().skip(skip) {
            if config.max_steps.is_some_and(|m| progress.step >= m) {
                stopped = true;
                break 'epochs;
            }
            let batch = data.batch(indices)?;
            let step = progress.step;
            let losses = match &mut models {
                Models::Mask(m) => {
                    m.set_lr(lr);
                    Breakdown::Mask(m.train_step(&batch, config.seed, step)?)
                }
                Models::Texture { texture, masks } => {
                    texture.set_lr(lr);
                    let generated = match masks {
                        Some(mg) => {
                            let z = mg.step_latents(batch.len(), mix_seed(config.seed, &[12]), step)?;
                            Some(mg.forward(&batch.image_bbox_cut, &batch.bbox_vec, &z)?.mask.detach())
                        }
                        None => None,
                    };
                    Breakdown::Texture(texture.train_step(&batch, config.seed, step, generated.as_ref())?.0)
                }
                Models::Joint { mask, texture } => {
                    mask.set_lr(lr);
                    texture.set_lr(lr);
                    mask.train_step(&batch, config.seed, step)?;
                    let z = mask.step_latents(batch.len(), mix_seed(config.seed, &[12]), step)?;
                    let m_hat = mask.forward(&batch.image_bbox_cut, &batch.bbox_vec, &z)?.mask;
                    let (b, grads) = texture.train_step(&batch, config.seed, step, Some(&m_hat))?;
                    mask.apply_generator_grads(&grads)?;
                    Breakdown::Texture(b)
                }
            };
            progress.step += 1;
            let record = StepRecord { stage: config.stage, epoch, step, lr, losses };
            writeln!(metrics, "{}", serde_json::to_string(&record)?)?;
            history.push(record);
        }
        progress.epoch = epoch + 1;
        log::info!("{:?} epoch {}/{} done at step {} (lr {lr:.2e})", config.stage, progress.epoch, total_epochs, progress.step);
        if config.checkpoint_every > 0 && progress.epoch % config.checkpoint_every == 0 && progress.epoch < total_epochs {
            write_checkpoints(&models, config, &dataset.class, &progress, &dataset_hash, Some(progress.epoch))?;
        }
    }
    if stopped {
        progress.epoch = (progress.step / batches_per_epoch as u64) as usize;
    }
    let checkpoints = write_checkpoints(&models, config, &dataset.class, &progress, &dataset_hash, None)?;
    Ok(TrainOutcome { checkpoints, history, steps: progress.step })
}

fn write_checkpoints(
    models: &Models,
    config: &TrainConfig,
    class: &str,
    progress: &Progress,
    dataset_hash: &str,
    epoch_tag: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let name = |kind: &str| match epoch_tag {
        Some(e) => config.out_dir.join(format!("{kind}_epoch{e:04}.safetensors")),
        None => config.out_dir.join(format!("{kind}.safetensors")),
    };
    let meta = |model: ModelConfig, seed: u64, dtype: DType| -> Result<CheckpointMeta> {
        let mut m = meta_for(class, model, dtype, seed)?;
        m.step = progress.step;
        m.epoch = progress.epoch;
        m.dataset_hash = Some(dataset_hash.to_string());
        m.train = Some(config.clone());
        Ok(m)
    };
    let mut written = Vec::new();
    let mut save_mask = |m: &MaskGan| -> Result<()> {
        let path = name("mask");
        checkpoint::save_mask(m, &path, meta(ModelConfig::Mask(m.config.clone()), mix_seed(config.seed, &[10]), m.dtype())?)?;
        written.push(path);
        Ok(())
    };
    match models {
        Models::Mask(m) => save_mask(m)?,
        Models::Joint { mask, .. } => save_mask(mask)?,
        Models::Texture { .. } => {}
    }
    let texture = match models {
        Models::Texture { texture, .. } | Models::Joint { texture, .. } => Some(texture),
        Models::Mask(_) => None,
    };
    if let Some(t) = texture {
        let path = name("texture");
        checkpoint::save_texture(t, &path, meta(ModelConfig::Texture(t.config.clone()), mix_seed(config.seed, &[11]), t.dtype())?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0, 100, 2e-4).unwrap(), 2e-4);
        assert_eq!(lr_at(50, 100, 2e-4).unwrap(), 2e-4);
        assert!((lr_at(75, 100, 2e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(100, 100, 2e-4).is_err());
        assert!(lr_at(99, 100, 2e-4).unwrap() > 0.0);
    }

    #[test]
    fn flat_toml_config() {
        let cfg = TrainConfig::from_toml("stage = \"texture\"\nepochs = 7\nno_bicycle = true\nseed = 3\n").unwrap();
        assert_eq!(cfg.stage, Stage::Texture);
        assert_eq!(cfg.total_epochs(), 7);
        assert!(!cfg.texture_config(64).unwrap().bicycle);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert_eq!(TrainConfig::default().total_epochs(), 1000);
        assert_eq!(TrainConfig { stage: Stage::Texture, ..Default::default() }.total_epochs(), 400);
    }

    #[test]
    fn each_flag_flips_one_switch() {
        let base = TrainConfig { stage: Stage::Texture, ..Default::default() };
        let t0 = base.texture_config(64).unwrap();
        let diff = |cfg: TrainConfig| {
            let t = cfg.texture_config(64).unwrap();
            [t.noise != t0.noise, t.bicycle != t0.bicycle, t.lambda_fm != t0.lambda_fm, t.lambda_per != t0.lambda_per]
                .iter()
                .filter(|&&b| b)
                .count()
        };
        assert_eq!(diff(TrainConfig { no_noise: true, ..base.clone() }), 1);
        assert_eq!(diff(TrainConfig { no_bicycle: true, ..base.clone() }), 1);
        assert_eq!(diff(TrainConfig { no_fm: true, ..base.clone() }), 1);
        assert_eq!(diff(TrainConfig { no_vgg: true, ..base.clone() }), 1);
        let m = TrainConfig { mrecon: true, ..Default::default() }.mask_config(64);
        assert!(m.mrecon && !m.bgcond);
        let m = TrainConfig { no_fm: true, ..Default::default() }.mask_config(64);
        assert_eq!(m.lambda_fm, 0.0);
    }
}
