//! Scaled-down training experiment: two mask runs (full, latent
//! reconstruction from the mask) and three texture runs (full, without the
//! encoded branch, without feature matching), all on the same synthetic
//! data and seed.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::Device;
use ndarray::Array2;
use stampgen::checkpoint;
use stampgen::dataset::{mix_seed, Dataset};
use stampgen::domain::{composite, cutout, ImageTensor, MaskTensor};
use stampgen::evaluation::{mean_pairwise_l1, subset_protocol, KidReport};
use stampgen::features::{Embedder, ExtractorSpec};
use stampgen::pipeline::sample_latent;
use stampgen::texture_gan::NoiseMode;
use stampgen::trainer::{train, Stage, TrainConfig};
use stampgen::{MaskGan, Result, TextureGan};

#[derive(Debug, Clone)]
pub struct DeskSettings {
    pub class: String,
    pub size: usize,
    /// Training samples for the mask runs.
    pub mask_train_count: usize,
    /// Training samples for the texture runs.
    pub texture_train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub mask_epochs: usize,
    pub texture_epochs: usize,
    /// Latent samples per conditioning input for the diversity measures.
    pub diversity_samples: usize,
    /// Conditioning inputs the diversity measures are averaged over.
    pub diversity_inputs: usize,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
}

impl Default for DeskSettings {
    fn default() -> Self {
        Self {
            class: "striped-blob".into(),
            size: 64,
            mask_train_count: 24,
            texture_train_count: 16,
            eval_count: 60,
            seed: 7,
            mask_epochs: 200,
            texture_epochs: 100,
            diversity_samples: 10,
            diversity_inputs: 8,
            kid_subsets: 50,
            kid_subset_size: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskReport {
    /// Share of generated masks with at least 95% of their mass in the box.
    pub inside_share: f64,
    pub mask_diversity_full: f64,
    pub mask_diversity_mrecon: f64,
    pub texture_diversity_bicycle: f64,
    pub texture_diversity_no_bicycle: f64,
    /// Systems: full, no feature matching.
    pub kid: KidReport,
    pub elapsed: Duration,
}

impl DeskReport {
    pub fn kid_full(&self) -> f64 {
        self.kid.systems[0].mean
    }

    pub fn kid_no_fm(&self) -> f64 {
        self.kid.systems[1].mean
    }
}

fn run(stage: Stage, tweak: impl FnOnce(&mut TrainConfig), s: &DeskSettings, data: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    let mut cfg = TrainConfig::desk(stage);
    cfg.seed = s.seed;
    cfg.epochs = Some(match stage {
        Stage::Mask => s.mask_epochs,
        _ => s.texture_epochs,
    });
    cfg.out_dir = dir.to_path_buf();
    tweak(&mut cfg);
    let out = train(&cfg, data)?;
    Ok(out.checkpoints[0].clone())
}

/// Mass share inside the box for one soft mask.
pub fn inside_fraction(mask: &MaskTensor, inside: &MaskTensor) -> f64 {
    let total = mask.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let within: f64 = mask.data().iter().zip(inside.data().iter()).map(|(&m, &b)| (m * b) as f64).sum();
    within / total
}

fn mask_rows(masks: &[MaskTensor]) -> Array2<f64> {
    let n = masks[0].data().len();
    Array2::from_shape_fn((masks.len(), n), |(i, j)| masks[i].data().as_slice().expect("standard layout")[j] as f64)
}

fn mask_diversity(model: &MaskGan, eval: &Dataset, s: &DeskSettings) -> Result<f64> {
    let mut total = 0.0;
    for (k, rec) in eval.records.iter().take(s.diversity_inputs).enumerate() {
        let i_b = cutout(&rec.image, rec.bbox.raster())?;
        let masks = (0..s.diversity_samples)
            .map(|j| model.gen_mask(&i_b, &sample_latent(model.config.z_dim, mix_seed(s.seed, &[0xd1, k as u64, j as u64])), &rec.bbox))
            .collect::<Result<Vec<_>>>()?;
        total += mean_pairwise_l1(mask_rows(&masks).view());
    }
    Ok(total / s.diversity_inputs as f64)
}

fn texture_diversity(model: &TextureGan, eval: &Dataset, embedder: &Embedder, s: &DeskSettings) -> Result<f64> {
    let mut total = 0.0;
    for (k, rec) in eval.records.iter().take(s.diversity_inputs).enumerate() {
        let i_m = cutout(&rec.image, &rec.mask)?;
        let textures = (0..s.diversity_samples)
            .map(|j| {
                let z = sample_latent(model.config.z_dim, mix_seed(s.seed, &[0xd2, k as u64, j as u64]));
                let t = model.gen_texture(&i_m, &rec.mask, &z, NoiseMode::Eval { seed: mix_seed(s.seed, &[0xd3, k as u64]) })?;
                composite(&rec.image, &t, &rec.mask)
            })
            .collect::<Result<Vec<_>>>()?;
        total += mean_pairwise_l1(embedder.extract(&textures)?.view());
    }
    Ok(total / s.diversity_inputs as f64)
}

fn composites(model: &TextureGan, cond: &Dataset, s: &DeskSettings) -> Result<Vec<ImageTensor>> {
    cond.records
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let z = sample_latent(model.config.z_dim, mix_seed(s.seed, &[0xd4, k as u64]));
            let t = model.gen_texture(&cutout(&rec.image, &rec.mask)?, &rec.mask, &z, NoiseMode::Eval { seed: mix_seed(s.seed, &[0xd5, k as u64]) })?;
            composite(&rec.image, &t, &rec.mask)
        })
        .collect()
}

pub fn run_desk(s: &DeskSettings) -> Result<DeskReport> {
    let start = Instant::now();
    let dev = Device::Cpu;
    let work = tempfile::tempdir()?;
    let mask_data = Dataset::synthetic(&s.class, s.size, s.mask_train_count, s.seed)?;
    let texture_data = Dataset::synthetic(&s.class, s.size, s.texture_train_count, s.seed)?;
    let eval = Dataset::synthetic(&s.class, s.size, s.eval_count, mix_seed(s.seed, &[0xe1]))?;
    let reals = Dataset::synthetic(&s.class, s.size, s.eval_count, mix_seed(s.seed, &[0xe2]))?;
    let sub = |name: &str| work.path().join(name);

    let full_mask = checkpoint::load_mask(&run(Stage::Mask, |_| {}, s, &mask_data, &sub("mask"))?, &dev)?.0;
    let mrecon = checkpoint::load_mask(&run(Stage::Mask, |c| c.mrecon = true, s, &mask_data, &sub("mask_mrecon"))?, &dev)?.0;
    let full_tex = checkpoint::load_texture(&run(Stage::Texture, |_| {}, s, &texture_data, &sub("texture"))?, &dev)?.0;
    let no_bicycle = checkpoint::load_texture(&run(Stage::Texture, |c| c.no_bicycle = true, s, &texture_data, &sub("texture_nb"))?, &dev)?.0;
    let no_fm = checkpoint::load_texture(&run(Stage::Texture, |c| c.no_fm = true, s, &texture_data, &sub("texture_nofm"))?, &dev)?.0;

    let mut inside = 0usize;
    for (k, rec) in eval.records.iter().enumerate() {
        let z = sample_latent(full_mask.config.z_dim, mix_seed(s.seed, &[0xd0, k as u64]));
        let m = full_mask.gen_mask(&cutout(&rec.image, rec.bbox.raster())?, &z, &rec.bbox)?;
        if inside_fraction(&m, rec.bbox.raster()) >= 0.95 {
            inside += 1;
        }
    }

    let embedder = Embedder::new(&ExtractorSpec::Random { seed: mix_seed(s.seed, &[0xee]) })?;
    let real_feats = embedder.extract(&reals.records.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
    let full_feats = embedder.extract(&composites(&full_tex, &eval, s)?)?;
    let no_fm_feats = embedder.extract(&composites(&no_fm, &eval, s)?)?;
    let kid = subset_protocol(real_feats.view(), &[full_feats.view(), no_fm_feats.view()], s.kid_subsets, s.kid_subset_size, s.seed)?;

    Ok(DeskReport {
        inside_share: inside as f64 / eval.len() as f64,
        mask_diversity_full: mask_diversity(&full_mask, &eval, s)?,
        mask_diversity_mrecon: mask_diversity(&mrecon, &eval, s)?,
        texture_diversity_bicycle: texture_diversity(&full_tex, &eval, &embedder, s)?,
        texture_diversity_no_bicycle: texture_diversity(&no_bicycle, &eval, &embedder, s)?,
        kid,
        elapsed: start.elapsed(),
    })
}
