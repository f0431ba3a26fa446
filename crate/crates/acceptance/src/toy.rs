//! Tiny models and inputs for gradient checks, plus the finite-difference
//! routine itself.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stampgen::dataset::{DatasetTensors, ExampleBatch, InstanceRecord};
use stampgen::features::{ExtractorSpec, Perceptual};
use stampgen::nn::ParamStore;
use stampgen::{ImageTensor, MaskGan, MaskGanConfig, MaskTensor, Result, TextureGan, TextureGanConfig};

pub const TOY_SIZE: usize = 8;

pub fn toy_mask_config() -> MaskGanConfig {
    MaskGanConfig {
        size: TOY_SIZE,
        z_dim: 4,
        base_channels: 1,
        max_channels: 2,
        downsamples: 1,
        res_blocks: 1,
        hidden: 4,
        disc_channels: 2,
        disc_layers: 1,
        ..MaskGanConfig::default()
    }
}

pub fn toy_texture_config() -> TextureGanConfig {
    TextureGanConfig {
        size: TOY_SIZE,
        z_dim: 2,
        base_channels: 2,
        max_channels: 2,
        downsamples: 1,
        res_blocks: 0,
        enc_channels: 1,
        enc_layers: 1,
        disc_channels: 2,
        disc_layers: 1,
        phi: ExtractorSpec::Random { seed: 11 },
        phi_tap: 2,
        ..TextureGanConfig::default()
    }
}

pub const TOY_PHI_STAGES: [(usize, usize); 2] = [(2, 1), (2, 2)];

pub fn toy_mask(seed: u64, dtype: DType) -> Result<MaskGan> {
    MaskGan::new(toy_mask_config(), seed, dtype, &Device::Cpu)
}

pub fn toy_texture(seed: u64, dtype: DType) -> Result<TextureGan> {
    let cfg = toy_texture_config();
    let phi = Perceptual::with_stages(&cfg.phi, &TOY_PHI_STAGES, cfg.phi_tap, dtype, &Device::Cpu)?;
    TextureGan::with_phi(cfg, seed, phi, dtype, &Device::Cpu)
}

/// Random images with a small rectangular object away from the border.
pub fn toy_records(n: usize, size: usize, seed: u64) -> Result<Vec<InstanceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let image = ImageTensor::new(Array3::from_shape_fn((size, size, 3), |_| rng.random_range(-1.0..1.0)))?;
            let (y0, x0) = (rng.random_range(1..size / 2), rng.random_range(1..size / 2));
            let (h, w) = (rng.random_range(2..=size / 2 - 1), rng.random_range(2..=size / 2 - 1));
            let mask = MaskTensor::new(Array2::from_shape_fn((size, size), |(y, x)| {
                ((y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x)) as u8 as f32
            }))?;
            InstanceRecord::new(format!("toy-{k}"), "toy", image, mask)
        })
        .collect()
}

pub fn toy_batch(n: usize, seed: u64, dtype: DType) -> Result<ExampleBatch> {
    let records = toy_records(n, TOY_SIZE, seed)?;
    let data = DatasetTensors::new(&records, dtype, &Device::Cpu)?;
    data.batch(&(0..n).collect::<Vec<_>>())
}

/// Shifts every bias by a small seeded offset. Zero-initialised biases put
/// activations of all-zero input regions exactly on the ReLU kink, where
/// central differences and the analytic gradient disagree by construction.
pub fn jitter_biases(store: &ParamStore, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in store.vars() {
        if name.ends_with(".bias") {
            let dims = var.dims().to_vec();
            let v: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let moved: Vec<f64> = v.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
            var.set(&Tensor::from_vec(moved, dims.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub params: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_err: f64,
    pub max_abs_diff: f64,
}

/// Central differences over every scalar in `store`. `objective` receives
/// the name of the parameter being perturbed.
pub fn finite_difference_check(
    store: &ParamStore,
    analytic: &GradStore,
    h: f64,
    mut objective: impl FnMut(&str) -> Result<f64>,
) -> Result<GradCheck> {
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut params = 0;
    for (name, var) in store.vars() {
        let dims = var.dims().to_vec();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let grad = match analytic.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            var.set(&Tensor::from_vec(v.clone(), dims.as_slice(), &Device::Cpu)?)?;
            let plus = objective(name)?;
            v[i] = base[i] - h;
            var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?)?;
            let minus = objective(name)?;
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (grad[i] - numeric).powi(2);
            a2 += grad[i].powi(2);
            n2 += numeric.powi(2);
            max_abs = max_abs.max((grad[i] - numeric).abs());
            params += 1;
        }
        var.set(&Tensor::from_vec(base, dims.as_slice(), &Device::Cpu)?)?;
    }
    let scale = a2.sqrt().max(n2.sqrt());
    Ok(GradCheck { params, rel_err: if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale }, max_abs_diff: max_abs })
}
