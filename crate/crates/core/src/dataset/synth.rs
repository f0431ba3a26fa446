//! Procedural object classes for deterministic small-scale training.
//!
//! Each sample is a background with a directional illumination gradient and
//! one object whose silhouette comes from a shape family and whose surface
//! comes from a texture family. The object's brightness is modulated by the
//! same illumination field as the background, so a texture generator can
//! learn to match scene lighting.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_instance, mix_seed, InstanceRecord};
use crate::domain::{ImageTensor, MaskTensor};
use crate::error::{Result, StampError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    /// Star-shaped outline with a random low-order Fourier boundary.
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Stripes,
    Spots,
    Solid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class: String,
    pub size: usize,
    pub shape: ShapeFamily,
    pub texture: TextureFamily,
    /// Mask area bounds as fractions of the image.
    pub min_area: f64,
    pub max_area: f64,
    /// Object base colour in `[0, 1]` RGB.
    pub color: [f64; 3],
}

impl SynthConfig {
    pub fn builtin(class: &str, size: usize) -> Result<Self> {
        let (shape, texture, color) = match class {
            "striped-blob" => (ShapeFamily::Blob, TextureFamily::Stripes, [0.95, 0.7, 0.35]),
            "spotted-ellipse" => (ShapeFamily::Ellipse, TextureFamily::Spots, [0.9, 0.85, 0.6]),
            "solid-ellipse" => (ShapeFamily::Ellipse, TextureFamily::Solid, [0.35, 0.55, 0.95]),
            other => {
                return Err(StampError::Dataset(format!(
                    "unknown synthetic class {other:?}; known: {}",
                    Self::BUILTIN.join(", ")
                )))
            }
        };
        if size < 16 {
            return Err(StampError::Dataset(format!("synthetic size {size} too small")));
        }
        Ok(Self {
            class: class.to_string(),
            size,
            shape,
            texture,
            min_area: 0.05,
            max_area: 0.40,
            color,
        })
    }

    pub const BUILTIN: [&'static str; 3] = ["striped-blob", "spotted-ellipse", "solid-ellipse"];
}

/// Object silhouette in continuous image coordinates.
struct Silhouette {
    cx: f64,
    cy: f64,
    /// Semi-axes before rotation.
    ax: f64,
    ay: f64,
    angle: f64,
    /// `(amplitude, frequency, phase)` terms of the radial boundary.
    harmonics: Vec<(f64, f64, f64)>,
}

impl Silhouette {
    fn radial_scale(&self, theta: f64) -> f64 {
        1.0 + self.harmonics.iter().map(|(a, k, p)| a * (k * theta + p).cos()).sum::<f64>()
    }

    /// Largest extent from the centre over all directions.
    fn max_scale(&self) -> f64 {
        1.0 + self.harmonics.iter().map(|(a, _, _)| a.abs()).sum::<f64>()
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.ax;
        let v = (-dx * s + dy * c) / self.ay;
        let r = (u * u + v * v).sqrt();
        r <= self.radial_scale(v.atan2(u))
    }
}

fn sample_silhouette(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Silhouette {
    let size = cfg.size as f64;
    let area = rng.random_range(cfg.min_area..cfg.max_area) * size * size;
    let aspect = rng.random_range((0.6f64).ln()..(1.6f64).ln()).exp();
    let harmonics = match cfg.shape {
        ShapeFamily::Ellipse => Vec::new(),
        ShapeFamily::Blob => (2..=4)
            .map(|k| (rng.random_range(-0.12..0.12), k as f64, rng.random_range(0.0..2.0 * PI)))
            .collect(),
    };
    // area of the unit shape is ~ pi * (1 + sum(a^2) / 2)
    let unit_area = PI * (1.0 + harmonics.iter().map(|(a, _, _)| a * a).sum::<f64>() / 2.0);
    let radius = (area / unit_area).sqrt();
    let mut s = Silhouette {
        cx: 0.0,
        cy: 0.0,
        ax: radius * aspect.sqrt(),
        ay: radius / aspect.sqrt(),
        angle: rng.random_range(0.0..PI),
        harmonics,
    };
    // keep two pixels of clearance from the border
    let reach = s.ax.max(s.ay) * s.max_scale();
    let limit = size / 2.0 - 2.5;
    if reach > limit {
        let shrink = limit / reach;
        s.ax *= shrink;
        s.ay *= shrink;
    }
    let reach = s.ax.max(s.ay) * s.max_scale();
    s.cx = rng.random_range((reach + 2.0)..=(size - reach - 2.0).max(reach + 2.0));
    s.cy = rng.random_range((reach + 2.0)..=(size - reach - 2.0).max(reach + 2.0));
    s
}

fn rasterize(s: &Silhouette, size: usize) -> Array2<f32> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        s.contains(x as f64 + 0.5, y as f64 + 0.5) as u8 as f32
    })
}

struct Texture {
    family: TextureFamily,
    color: [f64; 3],
    dark: [f64; 3],
    frequency: f64,
    orientation: f64,
    phase: f64,
    spots: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, s: &Silhouette) -> Self {
        let jitter = |rng: &mut ChaCha8Rng, v: f64| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
        let color = [jitter(rng, cfg.color[0]), jitter(rng, cfg.color[1]), jitter(rng, cfg.color[2])];
        let dark = color.map(|c| c * 0.25);
        let reach = s.ax.max(s.ay);
        let spots = (0..rng.random_range(4..9))
            .map(|_| {
                let r = rng.random_range(0.0..reach);
                let t = rng.random_range(0.0..2.0 * PI);
                (s.cx + r * t.cos(), s.cy + r * t.sin(), rng.random_range(1.5..3.5))
            })
            .collect();
        Self {
            family: cfg.texture,
            color,
            dark,
            frequency: rng.random_range(4.0..7.0) / cfg.size as f64 * 2.0 * PI,
            orientation: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
            spots,
        }
    }

    fn albedo(&self, x: f64, y: f64, c: usize) -> f64 {
        let mix = match self.family {
            TextureFamily::Solid => 0.0,
            TextureFamily::Stripes => {
                let (s, co) = self.orientation.sin_cos();
                let v = (self.frequency * (x * co + y * s) + self.phase).sin();
                (0.5 + 0.5 * (3.0 * v).tanh()).clamp(0.0, 1.0)
            }
            TextureFamily::Spots => self
                .spots
                .iter()
                .map(|&(sx, sy, r)| {
                    let d = ((x - sx).powi(2) + (y - sy).powi(2)).sqrt();
                    (1.0 - (d - r).max(0.0)).clamp(0.0, 1.0)
                })
                .fold(0.0, f64::max),
        };
        self.color[c] * (1.0 - mix) + self.dark[c] * mix
    }
}

/// Generates one `(image, mask)` pair. Deterministic per `(seed, config)`;
/// the mask always passes the ingestion filter and lies within the
/// configured area bounds.
pub fn synth_sample(seed: u64, cfg: &SynthConfig) -> Result<(ImageTensor, MaskTensor)> {
    let size = cfg.size;
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[attempt]));
        let silhouette = sample_silhouette(&mut rng, cfg);
        let mask = MaskTensor::new(rasterize(&silhouette, size))?;
        let area = mask.count_nonzero() as f64 / (size * size) as f64;
        if check_instance(&mask).is_some() || area < cfg.min_area || area > cfg.max_area {
            continue;
        }
        let texture = Texture::sample(&mut rng, cfg, &silhouette);

        // illumination: linear ramp along a random direction
        let light_dir = rng.random_range(0.0..2.0 * PI);
        let strength = rng.random_range(0.5..1.0);
        let offset = rng.random_range(-0.15..0.15);
        // green well above blue, so no background pixel comes near the
        // all-zero value a cutout writes into the hole
        let bg_color: [f64; 3] = [
            rng.random_range(0.3..0.55),
            rng.random_range(0.6..0.85),
            rng.random_range(0.05..0.2),
        ];
        let wave = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0), rng.random_range(0.0..2.0 * PI));
        let (ls, lc) = light_dir.sin_cos();
        let n = size as f64;
        let light = |x: f64, y: f64| {
            let t = ((x / n - 0.5) * lc + (y / n - 0.5) * ls) * strength;
            (0.55 + offset + 0.8 * t).clamp(0.1, 1.0)
        };

        let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.02..0.02)).collect();
        let mut image = Array3::<f32>::zeros((size, size, 3));
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let l = light(fx, fy);
                let inside = mask.data()[[y, x]] == 1.0;
                let ripple = 0.04 * ((wave.0 * fx / n * 2.0 * PI).sin() * (wave.1 * fy / n * 2.0 * PI + wave.2).cos());
                for c in 0..3 {
                    let base = if inside { texture.albedo(fx, fy, c) } else { bg_color[c] + ripple };
                    let v = (l * base + grain[y * size + x]).clamp(0.0, 1.0);
                    image[[y, x, c]] = (2.0 * v - 1.0) as f32;
                }
            }
        }
        return Ok((ImageTensor::new(image)?, mask));
    }
    Err(StampError::Dataset(format!("could not place an object for seed {seed}")))
}

pub fn synth_record(seed: u64, cfg: &SynthConfig) -> Result<InstanceRecord> {
    let (image, mask) = synth_sample(seed, cfg)?;
    InstanceRecord::new(format!("synth-{seed}"), cfg.class.clone(), image, mask)
}
