//! On-disk dataset layout: `manifest.json` plus `images/` and `masks/` PNG
//! pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{synth_record, SynthConfig};
use super::{coco, filter_instances, mix_seed, InstanceRecord};
use crate::domain::binarize;
use crate::error::{Result, StampError};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synth { seed: u64, config: SynthConfig },
    Coco { annotations: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    /// Generator seed for synthetic entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class: String,
    pub size: usize,
    pub source: DatasetSource,
    pub entries: Vec<ManifestEntry>,
}

/// Records of one class at one resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class: String,
    pub size: usize,
    pub source: DatasetSource,
    pub records: Vec<InstanceRecord>,
    seeds: Vec<Option<u64>>,
}

impl Dataset {
    /// `count` samples of a built-in synthetic class. Sample `k` uses
    /// generator seed `mix_seed(seed, [k])`.
    pub fn synthetic(class: &str, size: usize, count: usize, seed: u64) -> Result<Self> {
        let config = SynthConfig::builtin(class, size)?;
        let seeds: Vec<u64> = (0..count as u64).map(|k| mix_seed(seed, &[k])).collect();
        let records = seeds
            .iter()
            .map(|&s| synth_record(s, &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class: class.to_string(),
            size,
            source: DatasetSource::Synth { seed, config },
            records,
            seeds: seeds.into_iter().map(Some).collect(),
        })
    }

    pub fn from_coco(annotations: &Path, image_dir: &Path, class: &str, size: usize) -> Result<(Self, coco::IngestStats)> {
        let (records, stats) = coco::load_coco(annotations, image_dir, class, size)?;
        let n = records.len();
        Ok((
            Self {
                class: class.to_string(),
                size,
                source: DatasetSource::Coco { annotations: annotations.display().to_string() },
                records,
                seeds: vec![None; n],
            },
            stats,
        ))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for (k, (r, seed)) in self.records.iter().zip(&self.seeds).enumerate() {
            let image = format!("images/{k:06}.png");
            let mask = format!("masks/{k:06}.png");
            imageio::save_image(&r.image, &dir.join(&image))?;
            imageio::save_mask(&r.mask, &dir.join(&mask))?;
            entries.push(ManifestEntry { id: r.image_id.clone(), image, mask, seed: *seed });
        }
        let manifest = Manifest { class: self.class.clone(), size: self.size, source: self.source.clone(), entries };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a saved dataset. Masks are re-binarized at 0.5 and the
    /// ingestion filter is re-applied.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut records = Vec::with_capacity(manifest.entries.len());
        let mut seeds = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = imageio::load_image(&dir.join(&e.image), Some(manifest.size))?;
            let mask = binarize(&imageio::load_mask(&dir.join(&e.mask), Some(manifest.size))?, 0.5)?;
            records.push(InstanceRecord::new(e.id.clone(), manifest.class.clone(), image, mask)?);
            seeds.push(e.seed);
        }
        let before = records.len();
        let kept = filter_instances(records);
        if kept.len() != before {
            return Err(StampError::Dataset(format!(
                "{} of {before} stored records fail the ingestion filter",
                before - kept.len()
            )));
        }
        Ok(Self { class: manifest.class, size: manifest.size, source: manifest.source, records: kept, seeds })
    }

    /// SHA-256 over every record's pixel values, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class.as_bytes());
        h.update((self.size as u64).to_le_bytes());
        for r in &self.records {
            for v in r.image.data().iter().chain(r.mask.data().iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic("spotted-ellipse", 32, 5, 9).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.class, "spotted-ellipse");
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.mask, b.mask);
            // 8-bit quantization only
            let err = (a.image.data() - b.image.data()).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(err <= 1.0 / 127.5 + 1e-6);
        }
        assert_eq!(back.source, ds.source);
    }

    #[test]
    fn content_hash_is_deterministic() {
        let a = Dataset::synthetic("solid-ellipse", 32, 3, 1).unwrap();
        let b = Dataset::synthetic("solid-ellipse", 32, 3, 1).unwrap();
        let c = Dataset::synthetic("solid-ellipse", 32, 3, 2).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
