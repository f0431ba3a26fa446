//! Versioned model files: safetensors payload plus a JSON metadata record
//! stored in the safetensors header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StampError};
use crate::features::ExtractorSpec;
use crate::mask_gan::{MaskGan, MaskGanConfig};
use crate::texture_gan::{TextureGan, TextureGanConfig};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "stampgen";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mask(MaskGanConfig),
    Texture(TextureGanConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Mask(_) => "mask",
            Self::Texture(_) => "texture",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Self::Mask(c) => c.size,
            Self::Texture(c) => c.size,
        }
    }

    pub fn z_dim(&self) -> usize {
        match self {
            Self::Mask(c) => c.z_dim,
            Self::Texture(c) => c.z_dim,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn phi(&self) -> Option<&ExtractorSpec> {
        match self {
            Self::Mask(_) => None,
            Self::Texture(c) => Some(&c.phi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub class: String,
    pub model: ModelConfig,
    pub config_hash: String,
    pub dtype: String,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Integer state such as optimizer step counts and EMA update count.
    pub counters: BTreeMap<String, u64>,
    #[serde(default)]
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(StampError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(StampError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (StDtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (StDtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(StampError::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn view_tensor(view: &TensorView, device: &Device) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, device)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(StampError::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

/// Serializes tensors and metadata to bytes.
pub fn encode(tensors: &HashMap<String, Tensor>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();
    let mut raw = Vec::with_capacity(names.len());
    for name in &names {
        let t = &tensors[*name];
        let (dt, bytes) = tensor_bytes(t)?;
        raw.push((name.to_string(), dt, t.dims().to_vec(), bytes));
    }
    let views = raw
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| StampError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    safetensors::serialize(views, Some(info)).map_err(|e| StampError::Checkpoint(e.to_string()))
}

/// Reads only the metadata record.
pub fn decode_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| StampError::Checkpoint(e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| StampError::Checkpoint("no model metadata".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(text).map_err(|e| StampError::Checkpoint(format!("incompatible metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(StampError::Checkpoint(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.config_hash != meta.model.hash()? {
        return Err(StampError::Checkpoint("config hash does not match stored config".into()));
    }
    Ok(meta)
}

pub fn decode(bytes: &[u8], device: &Device) -> Result<(HashMap<String, Tensor>, CheckpointMeta)> {
    let meta = decode_meta(bytes)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| StampError::Checkpoint(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        out.insert(name, view_tensor(&view, device)?);
    }
    Ok((out, meta))
}

pub fn save(path: &Path, tensors: &HashMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let bytes = encode(tensors, meta)?;
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("safetensors.partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, CheckpointMeta)> {
    decode(&std::fs::read(path)?, device)
}

pub fn file_hash(path: &Path) -> Result<String> {
    crate::features::sha256_file(path)
}

pub fn meta_for(class: &str, model: ModelConfig, dtype: DType, seed: u64) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        class: class.to_string(),
        config_hash: model.hash()?,
        model,
        dtype: dtype_name(dtype)?.to_string(),
        step: 0,
        epoch: 0,
        seed,
        counters: BTreeMap::new(),
        dataset_hash: None,
        train: None,
    })
}

fn with_state(mut meta: CheckpointMeta, counters: HashMap<String, u64>) -> CheckpointMeta {
    meta.counters = counters.into_iter().collect();
    meta
}

pub fn save_mask(model: &MaskGan, path: &Path, meta: CheckpointMeta) -> Result<()> {
    let (tensors, counters) = model.state_tensors();
    save(path, &tensors, &with_state(meta, counters))
}

pub fn save_texture(model: &TextureGan, path: &Path, meta: CheckpointMeta) -> Result<()> {
    let (tensors, counters) = model.state_tensors();
    save(path, &tensors, &with_state(meta, counters))
}

pub fn load_mask(path: &Path, device: &Device) -> Result<(MaskGan, CheckpointMeta)> {
    mask_from_bytes(&std::fs::read(path)?, device)
}

pub fn load_texture(path: &Path, device: &Device) -> Result<(TextureGan, CheckpointMeta)> {
    texture_from_bytes(&std::fs::read(path)?, device)
}

pub fn mask_from_bytes(bytes: &[u8], device: &Device) -> Result<(MaskGan, CheckpointMeta)> {
    let (tensors, meta) = decode(bytes, device)?;
    let ModelConfig::Mask(config) = &meta.model else {
        return Err(StampError::Checkpoint(format!("expected a mask model, found {}", meta.model.kind())));
    };
    let mut model = MaskGan::new(config.clone(), meta.seed, parse_dtype(&meta.dtype)?, device)?;
    model.load_state(&tensors, &meta.counters.clone().into_iter().collect())?;
    Ok((model, meta))
}

pub fn texture_from_bytes(bytes: &[u8], device: &Device) -> Result<(TextureGan, CheckpointMeta)> {
    let (tensors, meta) = decode(bytes, device)?;
    let ModelConfig::Texture(config) = &meta.model else {
        return Err(StampError::Checkpoint(format!("expected a texture model, found {}", meta.model.kind())));
    };
    let mut model = TextureGan::new(config.clone(), meta.seed, parse_dtype(&meta.dtype)?, device)?;
    model.load_state(&tensors, &meta.counters.clone().into_iter().collect())?;
    Ok((model, meta))
}
