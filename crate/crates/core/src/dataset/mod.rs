//! Instance records, the filtering rules applied on ingestion, derived
//! training examples and batching.

pub mod coco;
pub mod store;
pub mod synth;

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{apply_mask, cutout, BoundingBox, ImageTensor, MaskTensor};
use crate::error::{Result, StampError};

pub use store::Dataset;
pub use synth::{synth_record, synth_sample, ShapeFamily, SynthConfig, TextureFamily};

/// Minimum mask area as a fraction of the image.
pub const MIN_AREA_FRACTION: f64 = 0.01;

/// One object instance: image, its binary mask and the tight box around it.
#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub image_id: String,
    pub class: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
    pub bbox: BoundingBox,
}

impl InstanceRecord {
    /// Builds a record, deriving the box from the mask.
    pub fn new(image_id: impl Into<String>, class: impl Into<String>, image: ImageTensor, mask: MaskTensor) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(StampError::Dimension("image and mask sizes differ".into()));
        }
        if !mask.is_binary() {
            return Err(StampError::InvalidValue("instance masks must be binary".into()));
        }
        let bbox = tight_bbox(&mask)?;
        Ok(Self { image_id: image_id.into(), class: class.into(), image, mask, bbox })
    }
}

/// Why a record was dropped by [`filter_instances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooSmall,
    MultipleComponents,
    TouchesBorder,
}

/// Checks the ingestion rules against a binary mask.
pub fn check_instance(mask: &MaskTensor) -> Option<Rejection> {
    let (h, w) = (mask.height(), mask.width());
    let area = mask.count_nonzero();
    if (area as f64) < MIN_AREA_FRACTION * (h * w) as f64 {
        return Some(Rejection::TooSmall);
    }
    let data = mask.data();
    let on_border = (0..w).any(|x| data[[0, x]] != 0.0 || data[[h - 1, x]] != 0.0)
        || (0..h).any(|y| data[[y, 0]] != 0.0 || data[[y, w - 1]] != 0.0);
    if on_border {
        return Some(Rejection::TouchesBorder);
    }
    if count_components(data) != 1 {
        return Some(Rejection::MultipleComponents);
    }
    None
}

/// Keeps records whose mask covers at least 1% of the image, forms a single
/// 4-connected component, and does not touch the outermost pixel ring.
pub fn filter_instances(records: Vec<InstanceRecord>) -> Vec<InstanceRecord> {
    records
        .into_iter()
        .filter(|r| check_instance(&r.mask).is_none())
        .collect()
}

/// Number of 4-connected components of nonzero pixels.
pub fn count_components(data: &Array2<f32>) -> usize {
    let (h, w) = data.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let mut components = 0;
    for start in 0..h * w {
        let (sy, sx) = (start / w, start % w);
        if data[[sy, sx]] == 0.0 || seen[[sy, sx]] {
            continue;
        }
        components += 1;
        seen[[sy, sx]] = true;
        queue.push_back((sy, sx));
        while let Some((y, x)) = queue.pop_front() {
            let neighbours = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in neighbours {
                if ny < h && nx < w && data[[ny, nx]] != 0.0 && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    components
}

/// Smallest box containing every nonzero pixel, normalized to `[0, 1]`.
pub fn tight_bbox(m: &MaskTensor) -> Result<BoundingBox> {
    let (h, w) = (m.height(), m.width());
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for ((y, x), &v) in m.data().indexed_iter() {
        if v != 0.0 {
            rows = (rows.0.min(y), rows.1.max(y));
            cols = (cols.0.min(x), cols.1.max(x));
        }
    }
    if rows.0 == usize::MAX {
        return Err(StampError::EmptyMask);
    }
    let vec = [
        cols.0 as f32 / w as f32,
        rows.0 as f32 / h as f32,
        (cols.1 + 1) as f32 / w as f32,
        (rows.1 + 1) as f32 / h as f32,
    ];
    BoundingBox::new(vec, h, w)
}

/// A record plus everything derived from it for training.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub image: ImageTensor,
    pub mask: MaskTensor,
    pub bbox: BoundingBox,
    /// Image with the box region zeroed.
    pub image_bbox_cut: ImageTensor,
    /// Image with the instance region zeroed.
    pub image_mask_cut: ImageTensor,
    /// Ground-truth texture: image times mask.
    pub foreground: ImageTensor,
}

pub fn make_example(record: &InstanceRecord) -> Result<TrainingExample> {
    Ok(TrainingExample {
        image: record.image.clone(),
        mask: record.mask.clone(),
        bbox: record.bbox.clone(),
        image_bbox_cut: cutout(&record.image, record.bbox.raster())?,
        image_mask_cut: cutout(&record.image, &record.mask)?,
        foreground: apply_mask(&record.image, &record.mask)?,
    })
}

/// Stacked `(N, ...)` tensors for a whole dataset, gathered into batches
/// without re-reading records.
#[derive(Debug, Clone)]
pub struct DatasetTensors {
    pub image: Tensor,
    pub mask: Tensor,
    pub bbox_raster: Tensor,
    pub bbox_vec: Tensor,
}

impl DatasetTensors {
    pub fn new(records: &[InstanceRecord], dtype: DType, device: &Device) -> Result<Self> {
        if records.is_empty() {
            return Err(StampError::Dataset("no records".into()));
        }
        let mut images = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        let mut rasters = Vec::with_capacity(records.len());
        let mut vecs = Vec::with_capacity(records.len() * 4);
        for r in records {
            images.push(r.image.to_tensor(dtype, device)?);
            masks.push(r.mask.to_tensor(dtype, device)?);
            rasters.push(r.bbox.raster().to_tensor(dtype, device)?);
            vecs.extend(r.bbox.vec());
        }
        Ok(Self {
            image: Tensor::cat(&images, 0)?,
            mask: Tensor::cat(&masks, 0)?,
            bbox_raster: Tensor::cat(&rasters, 0)?,
            bbox_vec: Tensor::from_vec(vecs, (records.len(), 4), device)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ExampleBatch> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.image.device())?;
        ExampleBatch::from_parts(
            self.image.index_select(&idx, 0)?,
            self.mask.index_select(&idx, 0)?,
            self.bbox_raster.index_select(&idx, 0)?,
            self.bbox_vec.index_select(&idx, 0)?,
        )
    }

    /// Deterministic shuffled batches for one epoch; a trailing partial
    /// batch is dropped.
    pub fn epoch_order(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xDA7A, epoch as u64]));
        order.shuffle(&mut rng);
        order.chunks_exact(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// A batch of training examples in `(B, C, H, W)` layout.
#[derive(Debug, Clone)]
pub struct ExampleBatch {
    pub image: Tensor,
    pub mask: Tensor,
    pub bbox_raster: Tensor,
    pub bbox_vec: Tensor,
    pub image_bbox_cut: Tensor,
    pub image_mask_cut: Tensor,
    pub foreground: Tensor,
}

impl ExampleBatch {
    pub fn from_parts(image: Tensor, mask: Tensor, bbox_raster: Tensor, bbox_vec: Tensor) -> Result<Self> {
        let image_bbox_cut = image.broadcast_mul(&(1.0 - &bbox_raster)?)?;
        let image_mask_cut = image.broadcast_mul(&(1.0 - &mask)?)?;
        let foreground = image.broadcast_mul(&mask)?;
        Ok(Self { image, mask, bbox_raster, bbox_vec, image_bbox_cut, image_mask_cut, foreground })
    }

    pub fn from_examples(examples: &[&TrainingExample], dtype: DType, device: &Device) -> Result<Self> {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut rasters = Vec::new();
        let mut vecs = Vec::new();
        for e in examples {
            images.push(e.image.to_tensor(dtype, device)?);
            masks.push(e.mask.to_tensor(dtype, device)?);
            rasters.push(e.bbox.raster().to_tensor(dtype, device)?);
            vecs.extend(e.bbox.vec());
        }
        Self::from_parts(
            Tensor::cat(&images, 0)?,
            Tensor::cat(&masks, 0)?,
            Tensor::cat(&rasters, 0)?,
            Tensor::from_vec(vecs, (examples.len(), 4), device)?.to_dtype(dtype)?,
        )
    }

    pub fn len(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SplitMix64-style combination of a base seed with a sequence of words.
pub fn mix_seed(seed: u64, words: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h = h.wrapping_add(w).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_with(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> MaskTensor {
        MaskTensor::new(Array2::from_shape_fn((h, w), |(y, x)| on(y, x) as u8 as f32)).unwrap()
    }

    fn record(mask: MaskTensor) -> InstanceRecord {
        let (h, w) = (mask.height(), mask.width());
        let image = ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 11) as f32 / 11.0 - 0.5
        }))
        .unwrap();
        InstanceRecord::new("r", "c", image, mask).unwrap()
    }

    #[test]
    fn one_percent_rule() {
        // 50 pixels of a 100x100 image: 0.5%
        let small = mask_with(100, 100, |y, x| (40..45).contains(&y) && (40..50).contains(&x));
        assert_eq!(small.count_nonzero(), 50);
        assert_eq!(check_instance(&small), Some(Rejection::TooSmall));
        let exact = mask_with(100, 100, |y, x| (40..50).contains(&y) && (40..50).contains(&x));
        assert_eq!(check_instance(&exact), None);
    }

    #[test]
    fn multiple_components_rejected() {
        let two = mask_with(40, 40, |y, x| {
            ((5..15).contains(&y) && (5..15).contains(&x)) || ((25..35).contains(&y) && (25..35).contains(&x))
        });
        assert_eq!(check_instance(&two), Some(Rejection::MultipleComponents));
        // diagonal contact is not 4-connected
        let diag = mask_with(40, 40, |y, x| {
            ((5..15).contains(&y) && (5..15).contains(&x)) || ((15..25).contains(&y) && (15..25).contains(&x))
        });
        assert_eq!(count_components(diag.data()), 2);
    }

    #[test]
    fn border_rule_and_holes() {
        let touching = mask_with(40, 40, |y, x| y < 10 && (5..15).contains(&x));
        assert_eq!(check_instance(&touching), Some(Rejection::TouchesBorder));
        let ring = mask_with(40, 40, |y, x| {
            (5..30).contains(&y) && (5..30).contains(&x) && !((12..20).contains(&y) && (12..20).contains(&x))
        });
        assert_eq!(check_instance(&ring), None);
    }

    #[test]
    fn centered_blob_retained_and_filter_idempotent() {
        let blob = |y: usize, x: usize| {
            let (dy, dx) = (y as f32 - 31.5, x as f32 - 31.5);
            dy * dy + dx * dx < 11.5 * 11.5
        };
        let m = mask_with(64, 64, blob);
        let frac = m.count_nonzero() as f64 / 4096.0;
        assert!(frac > 0.09 && frac < 0.11, "{frac}");
        let records = vec![
            record(m),
            record(mask_with(64, 64, |y, x| y < 20 && (5..20).contains(&x))),
            record(mask_with(64, 64, |y, x| (30..32).contains(&y) && (30..32).contains(&x))),
        ];
        let once = filter_instances(records);
        assert_eq!(once.len(), 1);
        let ids: Vec<_> = once.iter().map(|r| r.mask.clone()).collect();
        let twice = filter_instances(once);
        assert_eq!(twice.iter().map(|r| r.mask.clone()).collect::<Vec<_>>(), ids);
    }

    #[test]
    fn tight_bbox_examples() {
        let full = MaskTensor::ones(64, 64);
        assert_eq!(tight_bbox(&full).unwrap().vec(), [0.0, 0.0, 1.0, 1.0]);
        let single = mask_with(64, 64, |y, x| y == 32 && x == 32);
        let b = tight_bbox(&single).unwrap();
        assert_eq!(b.vec(), [32.0 / 64.0, 32.0 / 64.0, 33.0 / 64.0, 33.0 / 64.0]);
        assert_eq!(b.raster().count_nonzero(), 1);
        assert_eq!(b.raster().data()[[32, 32]], 1.0);
        assert!(matches!(tight_bbox(&MaskTensor::zeros(8, 8)), Err(StampError::EmptyMask)));
    }

    #[test]
    fn example_fields() {
        let m = mask_with(32, 32, |y, x| (8..20).contains(&y) && (10..18).contains(&x));
        let r = record(m);
        let e = make_example(&r).unwrap();
        let raster = r.bbox.raster().data();
        for ((y, x, c), &v) in e.image_bbox_cut.data().indexed_iter() {
            let expected = if raster[[y, x]] == 1.0 { 0.0 } else { e.image.data()[[y, x, c]] };
            assert_eq!(v, expected);
        }
        for ((y, x, c), &v) in e.foreground.data().indexed_iter() {
            if e.mask.data()[[y, x]] == 0.0 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, e.image.data()[[y, x, c]]);
            }
            // box covers the mask
            if e.mask.data()[[y, x]] == 1.0 {
                assert_eq!(raster[[y, x]], 1.0);
            }
        }
        let back = crate::domain::composite(&e.image_mask_cut, &e.foreground, &e.mask).unwrap();
        assert_eq!(back, e.image);
    }

    #[test]
    fn epoch_order_is_deterministic() {
        let recs: Vec<_> = (0..10)
            .map(|i| record(mask_with(16, 16, move |y, x| (4..10).contains(&y) && (3..(8 + i % 3)).contains(&x))))
            .collect();
        let t = DatasetTensors::new(&recs, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.epoch_order(5, 3, 4), t.epoch_order(5, 3, 4));
        assert_ne!(t.epoch_order(5, 3, 4), t.epoch_order(5, 4, 4));
        assert_eq!(t.epoch_order(5, 3, 4).len(), 2);
        let b = t.batch(&[1, 3]).unwrap();
        assert_eq!(b.image.dims(), &[2, 3, 16, 16]);
        assert_eq!(b.bbox_vec.dims(), &[2, 4]);
    }
}
