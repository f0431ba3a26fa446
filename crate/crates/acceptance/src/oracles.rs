//! Scalar reference implementations. Everything here is written with plain
//! loops over `f64` slices and shares no code with the library.

use ndarray::{Array4, ArrayView2};

pub fn hinge_d(real: &[f64], fake: &[f64]) -> f64 {
    let mut r = 0.0;
    for &v in real {
        r += if 1.0 - v > 0.0 { 1.0 - v } else { 0.0 };
    }
    let mut f = 0.0;
    for &v in fake {
        f += if 1.0 + v > 0.0 { 1.0 + v } else { 0.0 };
    }
    r / real.len() as f64 + f / fake.len() as f64
}

pub fn hinge_g(fake: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in fake {
        s -= v;
    }
    s / fake.len() as f64
}

/// Texture-stage adversarial pair `(g, d)`: one real and two fake branches.
pub fn texture_adv(real: &[f64], fake_a: &[f64], fake_b: &[f64]) -> (f64, f64) {
    let mut d = 0.0;
    for &v in real {
        d += (1.0 - v).max(0.0) / real.len() as f64;
    }
    for &v in fake_a {
        d += (1.0 + v).max(0.0) / fake_a.len() as f64;
    }
    for &v in fake_b {
        d += (1.0 + v).max(0.0) / fake_b.len() as f64;
    }
    (hinge_g(fake_a) + hinge_g(fake_b), d)
}

/// Mean absolute difference, rows of equal length.
pub fn mean_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y).abs();
            n += 1;
        }
    }
    s / n as f64
}

/// KL to the standard normal per row, summed over dimensions, averaged over rows.
pub fn kl(mu: &[Vec<f64>], logvar: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (m, l) in mu.iter().zip(logvar) {
        let mut row = 0.0;
        for j in 0..m.len() {
            row += 0.5 * (m[j] * m[j] + l[j].exp() - l[j] - 1.0);
        }
        total += row;
    }
    total / mu.len() as f64
}

/// Running mean of per-layer features with zero start, plus the
/// feature-matching loss against it.
#[derive(Debug, Clone)]
pub struct EmaOracle {
    pub decay: f64,
    pub bias_correction: bool,
    /// Per layer: flattened per-sample feature map.
    pub values: Vec<Vec<f64>>,
    pub updates: u32,
}

impl EmaOracle {
    pub fn new(decay: f64, bias_correction: bool) -> Self {
        Self { decay, bias_correction, values: Vec::new(), updates: 0 }
    }

    /// `feats[l][b]` is sample `b`'s flattened map at layer `l`.
    pub fn update(&mut self, feats: &[Vec<Vec<f64>>]) {
        if self.values.is_empty() {
            self.values = feats.iter().map(|l| vec![0.0; l[0].len()]).collect();
        }
        for (l, layer) in feats.iter().enumerate() {
            for e in 0..layer[0].len() {
                let mut mean = 0.0;
                for sample in layer {
                    mean += sample[e];
                }
                mean /= layer.len() as f64;
                self.values[l][e] = self.decay * self.values[l][e] + (1.0 - self.decay) * mean;
            }
        }
        self.updates += 1;
    }

    pub fn target(&self, l: usize, e: usize) -> f64 {
        let v = self.values[l][e];
        if self.bias_correction {
            v / (1.0 - self.decay.powi(self.updates as i32))
        } else {
            v
        }
    }

    /// Sum over layers of the per-element mean squared difference.
    pub fn loss(&self, fake: &[Vec<Vec<f64>>]) -> f64 {
        let mut total = 0.0;
        for (l, layer) in fake.iter().enumerate() {
            let mut s = 0.0;
            let mut n = 0usize;
            for sample in layer {
                for (e, &v) in sample.iter().enumerate() {
                    let d = v - self.target(l, e);
                    s += d * d;
                    n += 1;
                }
            }
            total += s / n as f64;
        }
        total
    }
}

/// Mean over layers of the per-element mean squared difference.
pub fn paired_fm(fake: &[Vec<f64>], real: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (f, r) in fake.iter().zip(real) {
        let mut s = 0.0;
        for (a, b) in f.iter().zip(r) {
            s += (a - b) * (a - b);
        }
        total += s / f.len() as f64;
    }
    total / fake.len() as f64
}

/// Direct zero-padded 2-D convolution, `x: (B, C, H, W)`, `w: (O, C, k, k)`.
pub fn conv2d(x: &Array4<f64>, w: &Array4<f64>, bias: &[f64], stride: usize, pad: usize) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = Array4::<f64>::zeros((b, o, ho, wo));
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[[n, ic, iy as usize, ix as usize]] * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                    y[[n, oc, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

/// A stack of 3x3 conv + ReLU stages, padding 1.
pub fn conv_relu_stack(x: &Array4<f64>, stages: &[(Array4<f64>, Vec<f64>, usize)]) -> Array4<f64> {
    let mut h = x.clone();
    for (w, b, stride) in stages {
        h = conv2d(&h, w, b, *stride, 1).mapv(|v| v.max(0.0));
    }
    h
}

/// Mean absolute difference of two feature maps.
pub fn feature_l1(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += (x - y).abs();
    }
    s / a.len() as f64
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    for j in 0..a.len() {
        dot += a[j] * b[j];
    }
    (dot / a.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel, by explicit
/// double loops.
pub fn kid(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let rows = |a: ArrayView2<f64>| -> Vec<Vec<f64>> { a.outer_iter().map(|r| r.to_vec()).collect() };
    let (xs, ys) = (rows(x), rows(y));
    let (m, n) = (xs.len(), ys.len());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly_kernel(&xs[i], &xs[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly_kernel(&ys[i], &ys[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in &xs {
        for b in &ys {
            kxy += poly_kernel(a, b);
        }
    }
    kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
