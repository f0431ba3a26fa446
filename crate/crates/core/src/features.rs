//! Fixed convolutional feature extractors: the perceptual-loss network and
//! the embedding used for KID. Neither is ever trained. Weights are either
//! drawn from a seeded generator or read from a safetensors file whose
//! SHA-256 must match the recorded digest.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::ImageTensor;
use crate::error::{Result, StampError};
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Random { seed: u64 },
    File { path: String, sha256: String },
}

impl ExtractorSpec {
    /// Stable identifier recorded in checkpoints and reports.
    pub fn content_id(&self) -> String {
        match self {
            Self::Random { seed } => format!("random:{seed}"),
            Self::File { sha256, .. } => format!("sha256:{sha256}"),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Stack of `(out_channels, stride)` 3x3 convolutions with ReLU.
#[derive(Debug)]
pub struct ConvStack {
    store: ParamStore,
    convs: Vec<Conv2d>,
    spec: ExtractorSpec,
}

impl ConvStack {
    pub fn new(spec: &ExtractorSpec, in_channels: usize, stages: &[(usize, usize)], dtype: DType, device: &Device) -> Result<Self> {
        let seed = match spec {
            ExtractorSpec::Random { seed } => *seed,
            ExtractorSpec::File { .. } => 0,
        };
        let mut store = ParamStore::new(seed, dtype, device);
        let mut convs = Vec::new();
        {
            let mut root = store.root();
            let mut c_in = in_channels;
            for (k, &(c_out, stride)) in stages.iter().enumerate() {
                let conv = Conv2d::new(&mut root.pp(format!("stage{k}")), c_in, c_out, 3, stride, 1)?;
                convs.push(conv.detached());
                c_in = c_out;
            }
        }
        if let ExtractorSpec::File { path, sha256 } = spec {
            let actual = sha256_file(Path::new(path))?;
            if &actual != sha256 {
                return Err(StampError::Checkpoint(format!("extractor weights {path}: sha256 {actual}, expected {sha256}")));
            }
            let tensors = candle_core::safetensors::load(path, device)?;
            store.load(&tensors.into_iter().collect())?;
        }
        Ok(Self { store, convs, spec: spec.clone() })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn stages(&self) -> usize {
        self.convs.len()
    }

    /// Activations after every stage.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn parameters(&self) -> HashMap<String, Tensor> {
        self.store.tensors()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        candle_core::safetensors::save(&self.store.tensors(), path)?;
        sha256_file(path)
    }
}

/// Perceptual feature network: three stages, tapped after a configurable one.
#[derive(Debug)]
pub struct Perceptual {
    stack: ConvStack,
    tap: usize,
}

pub const PERCEPTUAL_STAGES: [(usize, usize); 3] = [(8, 1), (16, 2), (32, 2)];

impl Perceptual {
    /// `tap` is 1-based; the default used by the texture model is 3.
    pub fn new(spec: &ExtractorSpec, tap: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_stages(spec, &PERCEPTUAL_STAGES, tap, dtype, device)
    }

    pub fn with_stages(spec: &ExtractorSpec, stages: &[(usize, usize)], tap: usize, dtype: DType, device: &Device) -> Result<Self> {
        if tap == 0 || tap > stages.len() {
            return Err(StampError::Config(format!("perceptual tap {tap} outside 1..={}", stages.len())));
        }
        Ok(Self { stack: ConvStack::new(spec, 3, &stages[..tap], dtype, device)?, tap })
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn spec(&self) -> &ExtractorSpec {
        self.stack.spec()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.stack.forward_all(x)?.pop().expect("at least one stage"))
    }

    pub fn parameters(&self) -> HashMap<String, Tensor> {
        self.stack.parameters()
    }
}

/// Image embedding for KID: mean-pooled activations of the last two stages.
#[derive(Debug)]
pub struct Embedder {
    stack: ConvStack,
}

pub const EMBEDDER_STAGES: [(usize, usize); 4] = [(16, 2), (32, 2), (64, 2), (96, 1)];

impl Embedder {
    pub fn new(spec: &ExtractorSpec) -> Result<Self> {
        Ok(Self { stack: ConvStack::new(spec, 3, &EMBEDDER_STAGES, DType::F32, &Device::Cpu)? })
    }

    pub fn dim(&self) -> usize {
        EMBEDDER_STAGES[2].0 + EMBEDDER_STAGES[3].0
    }

    pub fn spec(&self) -> &ExtractorSpec {
        self.stack.spec()
    }

    /// One feature row per image. Images are embedded one at a time, so a
    /// row never depends on the rest of the batch.
    pub fn extract(&self, images: &[ImageTensor]) -> Result<Array2<f64>> {
        let d = self.dim();
        let mut out = Array2::<f64>::zeros((images.len(), d));
        for (row, img) in images.iter().enumerate() {
            let acts = self.stack.forward_all(&img.to_tensor(DType::F32, &Device::Cpu)?)?;
            let pooled: Vec<Tensor> = acts[2..]
                .iter()
                .map(|a| a.flatten_from(2)?.mean(D::Minus1))
                .collect::<candle_core::Result<_>>()?;
            let v = Tensor::cat(&pooled, 1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            out.row_mut(row).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn img(seed: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((32, 32, 3), |(y, x, c)| {
            (((y * 13 + x * 7 + c * 3 + seed * 11) % 17) as f32 / 8.5) - 1.0
        }))
        .unwrap()
    }

    #[test]
    fn embedder_rows_are_batch_independent() {
        let e = Embedder::new(&ExtractorSpec::Random { seed: 3 }).unwrap();
        let a = e.extract(&[img(0), img(1), img(2)]).unwrap();
        let b = e.extract(&[img(2), img(0)]).unwrap();
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.ncols(), e.dim());
        assert_eq!(e.extract(&[img(1)]).unwrap().row(0), a.row(1));
    }

    #[test]
    fn file_weights_verified_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.safetensors");
        let random = Perceptual::new(&ExtractorSpec::Random { seed: 5 }, 3, DType::F32, &Device::Cpu).unwrap();
        let digest = random.stack.save(&path).unwrap();
        let spec = ExtractorSpec::File { path: path.display().to_string(), sha256: digest };
        let loaded = Perceptual::new(&spec, 3, DType::F32, &Device::Cpu).unwrap();
        let x = img(4).to_tensor(DType::F32, &Device::Cpu).unwrap();
        let diff = (random.forward(&x).unwrap() - loaded.forward(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
        let wrong = ExtractorSpec::File { path: path.display().to_string(), sha256: "00".into() };
        assert!(Perceptual::new(&wrong, 3, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn tap_bounds() {
        assert!(Perceptual::new(&ExtractorSpec::Random { seed: 0 }, 0, DType::F32, &Device::Cpu).is_err());
        assert!(Perceptual::new(&ExtractorSpec::Random { seed: 0 }, 4, DType::F32, &Device::Cpu).is_err());
        let p = Perceptual::new(&ExtractorSpec::Random { seed: 0 }, 2, DType::F32, &Device::Cpu).unwrap();
        let y = p.forward(&img(0).to_tensor(DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.dims(), &[1, 16, 16, 16]);
    }
}
