//! Discovers checkpoints under the model directory and pairs a mask model
//! with a texture model per class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use candle_core::Device;
use serde::Serialize;
use sha2::{Digest, Sha256};
use stampgen::checkpoint::{self, CheckpointMeta};
use stampgen::StampModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub file: String,
    /// SHA-256 of the checkpoint file.
    pub hash: String,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub class: String,
    pub resolution: usize,
    pub mask: CheckpointInfo,
    pub texture: CheckpointInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incompatible {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Loading,
    Ready,
    Failed,
}

pub(crate) enum SlotState {
    Loading,
    Ready(Arc<StampModel>),
    Failed(String),
}

pub struct ModelSlot {
    pub info: ModelInfo,
    mask_path: PathBuf,
    texture_path: PathBuf,
    pub(crate) state: RwLock<SlotState>,
}

impl ModelSlot {
    pub fn status(&self) -> SlotStatus {
        match &*self.state.read().expect("slot lock") {
            SlotState::Loading => SlotStatus::Loading,
            SlotState::Ready(_) => SlotStatus::Ready,
            SlotState::Failed(_) => SlotStatus::Failed,
        }
    }

    /// Reads the weights; the slot is ready afterwards, or failed.
    pub fn load(&self, device: &Device) {
        let next = match StampModel::load(&self.mask_path, &self.texture_path, device) {
            Ok(m) => SlotState::Ready(Arc::new(m)),
            Err(e) => {
                log::error!("loading {}: {e}", self.info.class);
                SlotState::Failed(e.to_string())
            }
        };
        *self.state.write().expect("slot lock") = next;
    }
}

pub struct Registry {
    pub slots: BTreeMap<String, ModelSlot>,
    pub incompatible: Vec<Incompatible>,
}

fn checkpoint_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path)? {
                let p = inner?.path();
                if p.extension().is_some_and(|e| e == "safetensors") {
                    out.push(p);
                }
            }
        } else if path.extension().is_some_and(|e| e == "safetensors") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

impl Registry {
    /// Reads checkpoint metadata only. Every listed model starts in the
    /// loading state.
    pub fn scan(dir: &Path) -> std::io::Result<Self> {
        let mut incompatible = Vec::new();
        let mut masks: BTreeMap<String, (PathBuf, CheckpointMeta, String)> = BTreeMap::new();
        let mut textures: BTreeMap<String, (PathBuf, CheckpointMeta, String)> = BTreeMap::new();
        for path in checkpoint_files(dir)? {
            let bytes = std::fs::read(&path)?;
            let meta = match checkpoint::decode_meta(&bytes) {
                Ok(m) => m,
                Err(e) => {
                    incompatible.push(Incompatible { file: relative(dir, &path), reason: e.to_string() });
                    continue;
                }
            };
            let hash = hex::encode(Sha256::digest(&bytes));
            let target = match meta.model.kind() {
                "mask" => &mut masks,
                _ => &mut textures,
            };
            if target.contains_key(&meta.class) {
                incompatible.push(Incompatible {
                    file: relative(dir, &path),
                    reason: format!("second {} model for class {:?}", meta.model.kind(), meta.class),
                });
                continue;
            }
            target.insert(meta.class.clone(), (path, meta, hash));
        }
        let mut slots = BTreeMap::new();
        for (class, (mpath, mmeta, mhash)) in masks {
            let Some((tpath, tmeta, thash)) = textures.remove(&class) else {
                incompatible.push(Incompatible { file: relative(dir, &mpath), reason: "no texture model for this class".into() });
                continue;
            };
            if mmeta.model.size() != tmeta.model.size() {
                for p in [&mpath, &tpath] {
                    incompatible.push(Incompatible { file: relative(dir, p), reason: "mask and texture resolutions differ".into() });
                }
                continue;
            }
            let info = ModelInfo {
                class: class.clone(),
                resolution: mmeta.model.size(),
                mask: CheckpointInfo { file: relative(dir, &mpath), hash: mhash, latent_dim: mmeta.model.z_dim() },
                texture: CheckpointInfo { file: relative(dir, &tpath), hash: thash, latent_dim: tmeta.model.z_dim() },
            };
            slots.insert(class, ModelSlot { info, mask_path: mpath, texture_path: tpath, state: RwLock::new(SlotState::Loading) });
        }
        for (_, (tpath, _, _)) in textures {
            incompatible.push(Incompatible { file: relative(dir, &tpath), reason: "no mask model for this class".into() });
        }
        Ok(Self { slots, incompatible })
    }

    pub fn load_all(&self, device: &Device) {
        for slot in self.slots.values() {
            slot.load(device);
        }
    }
}
