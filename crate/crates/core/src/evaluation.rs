//! KID with a paired subset protocol, diversity statistics, and the
//! nearest-neighbour mask retrieval baseline.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::tight_bbox;
use crate::domain::MaskTensor;
use crate::error::{Result, StampError};
use crate::imageio::resize_mask_nearest;

/// `(x . y / d + 1)^3` for every pair of rows.
fn kernel_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    x.dot(&y.t()).mapv(|v| (v / d + 1.0).powi(3))
}

/// Unbiased squared MMD with the cubic polynomial kernel. Within-set
/// means exclude the diagonal; the cross term averages every pair.
pub fn kid(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(StampError::InsufficientSamples(m.min(n)));
    }
    if x.ncols() != y.ncols() {
        return Err(StampError::Dimension(format!("feature dims {} vs {}", x.ncols(), y.ncols())));
    }
    let off_diag_mean = |k: Array2<f64>, n: usize| (k.sum() - k.diag().sum()) / (n * (n - 1)) as f64;
    let kxx = off_diag_mean(kernel_matrix(x, x), m);
    let kyy = off_diag_mean(kernel_matrix(y, y), n);
    let kxy = kernel_matrix(x, y).mean().expect("non-empty");
    Ok(kxx + kyy - 2.0 * kxy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Fraction of subsets on which this system had the lowest score.
    pub count_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KidReport {
    pub n_subsets: usize,
    pub subset_size: usize,
    pub seed: u64,
    pub systems: Vec<SystemScores>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draws `n_subsets` index subsets of the real set and of the generated
/// sets, shares them across all systems, and scores each subset. Ties for
/// the best score go to the lowest system index.
pub fn subset_protocol(
    real: ArrayView2<f64>,
    systems: &[ArrayView2<f64>],
    n_subsets: usize,
    subset_size: usize,
    seed: u64,
) -> Result<KidReport> {
    if systems.is_empty() {
        return Err(StampError::InvalidValue("no systems to compare".into()));
    }
    if subset_size < 2 {
        return Err(StampError::InsufficientSamples(subset_size));
    }
    let fake_len = systems.iter().map(|s| s.nrows()).min().expect("non-empty");
    if subset_size > real.nrows() || subset_size > fake_len {
        return Err(StampError::InvalidValue(format!(
            "subset size {subset_size} exceeds set size (real {}, smallest generated {fake_len})",
            real.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = vec![Vec::with_capacity(n_subsets); systems.len()];
    let mut wins = vec![0usize; systems.len()];
    for _ in 0..n_subsets {
        let ri = sample(&mut rng, real.nrows(), subset_size).into_vec();
        let fi = sample(&mut rng, fake_len, subset_size).into_vec();
        let r = real.select(Axis(0), &ri);
        let mut best = (f64::INFINITY, 0);
        for (k, sys) in systems.iter().enumerate() {
            let s = kid(r.view(), sys.select(Axis(0), &fi).view())?;
            if s < best.0 {
                best = (s, k);
            }
            scores[k].push(s);
        }
        wins[best.1] += 1;
    }
    let systems = scores
        .into_iter()
        .zip(wins)
        .map(|(scores, w)| {
            let (mean, std) = mean_std(&scores);
            SystemScores { scores, mean, std, count_best: w as f64 / n_subsets.max(1) as f64 }
        })
        .collect();
    Ok(KidReport { n_subsets, subset_size, seed, systems })
}

/// Mean L1 distance over all unordered row pairs, divided by the row length.
pub fn mean_pairwise_l1(rows: ArrayView2<f64>) -> f64 {
    let n = rows.nrows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            total += (&rows.row(a) - &rows.row(b)).mapv(f64::abs).sum() / rows.ncols() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Side of the square canvas masks are compared on.
const RETRIEVAL_CANVAS: usize = 64;

/// Tight crop scaled uniformly so its longer side spans the canvas, centred
/// on a zero background. Keeps the aspect ratio, drops position and scale.
fn canonical(m: &MaskTensor) -> Result<MaskTensor> {
    let (rows, cols) = tight_bbox(m)?.pixel_ranges();
    let c = MaskTensor::new(m.data().slice(ndarray::s![rows, cols]).to_owned())?;
    let n = RETRIEVAL_CANVAS;
    let scale = n as f64 / c.height().max(c.width()) as f64;
    let h = ((c.height() as f64 * scale).round() as usize).clamp(1, n);
    let w = ((c.width() as f64 * scale).round() as usize).clamp(1, n);
    let r = resize_mask_nearest(&c, h, w)?;
    let (oy, ox) = ((n - h) / 2, (n - w) / 2);
    let mut out = Array2::<f32>::zeros((n, n));
    out.slice_mut(ndarray::s![oy..oy + h, ox..ox + w]).assign(r.data());
    MaskTensor::new(out)
}

fn cosine(a: &MaskTensor, b: &MaskTensor) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Corpus index whose mask, tight-cropped and rescaled onto a common
/// square canvas, has the highest cosine similarity with the query treated
/// the same way. Ties go to the lowest index.
pub fn nn_mask_retrieve(query: &MaskTensor, corpus: &[MaskTensor]) -> Result<usize> {
    if corpus.is_empty() {
        return Err(StampError::InvalidValue("empty retrieval corpus".into()));
    }
    let q = canonical(query)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, m) in corpus.iter().enumerate() {
        let sim = match canonical(m) {
            Ok(c) => cosine(&q, &c),
            Err(StampError::EmptyMask) => 0.0,
            Err(e) => return Err(e),
        };
        if sim > best.0 {
            best = (sim, k);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kid_symmetric_and_needs_two_samples() {
        let x = array![[0.1, 0.2], [0.3, -0.1], [1.0, 0.5]];
        let y = array![[0.0, 0.0], [0.4, 0.4], [-0.2, 0.9], [0.5, 0.1]];
        let a = kid(x.view(), y.view()).unwrap();
        let b = kid(y.view(), x.view()).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(kid(x.slice(ndarray::s![..1, ..]), y.view()), Err(StampError::InsufficientSamples(1))));
    }

    #[test]
    fn single_system_wins_everything() {
        let x = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let y = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 5 + j) as f64).cos());
        let r = subset_protocol(x.view(), &[y.view()], 10, 8, 0).unwrap();
        assert_eq!(r.systems[0].count_best, 1.0);
        assert!(subset_protocol(x.view(), &[y.view()], 10, 21, 0).is_err());
    }

    #[test]
    fn retrieval_prefers_identical_over_complement() {
        let q = MaskTensor::new(Array2::from_shape_fn((16, 16), |(y, x)| ((3..10).contains(&y) && (4..8).contains(&x)) as u8 as f32)).unwrap();
        let comp = MaskTensor::new(q.data().mapv(|v| 1.0 - v)).unwrap();
        assert_eq!(nn_mask_retrieve(&q, &[comp, q.clone()]).unwrap(), 1);
        assert!(nn_mask_retrieve(&q, &[]).is_err());
        assert!(nn_mask_retrieve(&MaskTensor::zeros(4, 4), &[q]).is_err());
    }

    #[test]
    fn pairwise_l1() {
        let rows = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        // pairs: 1, 1, 1 (per-element means)
        assert!((mean_pairwise_l1(rows.view()) - 1.0).abs() < 1e-15);
    }
}
