//! COCO-style instance annotation reader: polygon and RLE masks for one
//! category, resized to a square resolution and filtered.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use super::{check_instance, InstanceRecord, Rejection};
use crate::domain::MaskTensor;
use crate::error::{Result, StampError};
use crate::imageio;

#[derive(Debug, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Uncompressed(Vec<u64>),
    Compressed(String),
}

/// Per-reason tally of what the reader dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub seen: usize,
    pub kept: usize,
    pub crowd: usize,
    pub too_small: usize,
    pub multiple_components: usize,
    pub touches_border: usize,
}

/// Even-odd fill of polygons `[x0, y0, x1, y1, ...]` tested at pixel centres.
pub fn rasterize_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((height, width));
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let py = y as f64 + 0.5;
            // crossings of the scanline, then fill between pairs
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= py) != (y1 <= py) {
                    xs.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                for x in 0..width {
                    let px = x as f64 + 0.5;
                    if px >= pair[0] && px < pair[1] {
                        out[[y, x]] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Decodes the compact string form of RLE counts.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = *bytes
                .get(p)
                .ok_or_else(|| StampError::Dataset("truncated RLE string".into()))? as i64
                - 48;
            if !(0..64).contains(&c) {
                return Err(StampError::Dataset(format!("invalid RLE byte at {p}")));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| StampError::Dataset("negative RLE run".into())))
        .collect()
}

/// Expands column-major run lengths (starting with a zero run).
pub fn decode_rle(counts: &[u64], height: usize, width: usize) -> Result<Array2<f32>> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(StampError::Dataset(format!(
            "RLE covers {total} pixels, expected {}",
            height * width
        )));
    }
    let mut out = Array2::<f32>::zeros((height, width));
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + run as usize {
                out[[p % height, p / height]] = 1.0;
            }
        }
        pos += run as usize;
    }
    Ok(out)
}

pub fn annotation_mask(seg: &Segmentation, height: usize, width: usize) -> Result<Array2<f32>> {
    match seg {
        Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, height, width)),
        Segmentation::Rle { counts, size } => {
            if size[0] != height || size[1] != width {
                return Err(StampError::Dataset(format!("RLE size {size:?} vs image {height}x{width}")));
            }
            let counts = match counts {
                RleCounts::Uncompressed(c) => c.clone(),
                RleCounts::Compressed(s) => decode_rle_string(s)?,
            };
            decode_rle(&counts, height, width)
        }
    }
}

/// Reads every non-crowd instance of `class`, resizes image and mask to
/// `size`x`size` and applies the ingestion filter.
pub fn load_coco(
    annotation_file: &Path,
    image_dir: &Path,
    class: &str,
    size: usize,
) -> Result<(Vec<InstanceRecord>, IngestStats)> {
    let file: CocoFile = serde_json::from_slice(&std::fs::read(annotation_file)?)?;
    let category = file
        .categories
        .iter()
        .find(|c| c.name == class)
        .ok_or_else(|| StampError::Dataset(format!("category {class:?} not in annotations")))?
        .id;
    let images: HashMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let mut cache = HashMap::new();
    let mut stats = IngestStats::default();
    let mut records = Vec::new();
    for ann in file.annotations.iter().filter(|a| a.category_id == category) {
        stats.seen += 1;
        if ann.iscrowd != 0 {
            stats.crowd += 1;
            continue;
        }
        let meta = images
            .get(&ann.image_id)
            .ok_or_else(|| StampError::Dataset(format!("annotation {} references missing image", ann.id)))?;
        let full = MaskTensor::new(annotation_mask(&ann.segmentation, meta.height, meta.width)?)?;
        let mask = imageio::resize_mask_nearest(&full, size, size)?;
        match check_instance(&mask) {
            Some(Rejection::TooSmall) => stats.too_small += 1,
            Some(Rejection::MultipleComponents) => stats.multiple_components += 1,
            Some(Rejection::TouchesBorder) => stats.touches_border += 1,
            None => {
                let image = match cache.get(&meta.id) {
                    Some(img) => Clone::clone(img),
                    None => {
                        let img = imageio::load_image(&image_dir.join(&meta.file_name), Some(size))?;
                        cache.insert(meta.id, img.clone());
                        img
                    }
                };
                records.push(InstanceRecord::new(format!("{}-{}", meta.id, ann.id), class, image, mask)?);
                stats.kept += 1;
            }
        }
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_polygon_fills_its_interior() {
        let m = rasterize_polygons(&[vec![2.0, 3.0, 6.0, 3.0, 6.0, 8.0, 2.0, 8.0]], 10, 10);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 4 * 5);
        assert_eq!(m[[3, 2]], 1.0);
        assert_eq!(m[[8, 2]], 0.0);
    }

    #[test]
    fn uncompressed_rle_is_column_major() {
        // 3x2 image: zeros 1, ones 2, zeros 3
        let m = decode_rle(&[1, 2, 3], 3, 2).unwrap();
        assert_eq!(m[[1, 0]], 1.0);
        assert_eq!(m[[2, 0]], 1.0);
        assert_eq!(m.sum(), 2.0);
        assert!(decode_rle(&[1, 2], 3, 2).is_err());
    }

    #[test]
    fn compressed_rle_matches_uncompressed() {
        // runs [3, 5, 2, 6] encoded with the delta scheme for index >= 3
        fn encode(counts: &[i64]) -> String {
            let mut s = String::new();
            for (i, &c) in counts.iter().enumerate() {
                let mut x = if i > 2 { c - counts[i - 2] } else { c };
                loop {
                    let mut c = x & 0x1f;
                    x >>= 5;
                    let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                    if more {
                        c |= 0x20;
                    }
                    s.push((c as u8 + 48) as char);
                    if !more {
                        break;
                    }
                }
            }
            s
        }
        let runs = [3i64, 5, 2, 6, 40, 8];
        let decoded = decode_rle_string(&encode(&runs)).unwrap();
        assert_eq!(decoded, runs.iter().map(|&r| r as u64).collect::<Vec<_>>());
    }

    #[test]
    fn segmentation_json_variants_parse() {
        let poly: Segmentation = serde_json::from_str("[[0,0,4,0,4,4]]").unwrap();
        assert!(matches!(poly, Segmentation::Polygons(_)));
        let rle: Segmentation = serde_json::from_str(r#"{"counts":[1,2,3],"size":[3,2]}"#).unwrap();
        assert!(matches!(rle, Segmentation::Rle { counts: RleCounts::Uncompressed(_), .. }));
        let rle: Segmentation = serde_json::from_str(r#"{"counts":"13","size":[1,4]}"#).unwrap();
        assert!(matches!(rle, Segmentation::Rle { counts: RleCounts::Compressed(_), .. }));
    }
}
