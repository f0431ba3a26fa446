//! PNG/JPEG encoding and decoding for domain images and masks, plus the
//! base64 wrapping used on the wire.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3};

use crate::domain::{ImageTensor, MaskTensor};
use crate::error::{Result, StampError};

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn image_to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let data = img.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(data[[y, x, 0]]), to_u8(data[[y, x, 1]]), to_u8(data[[y, x, 2]])])
    })
}

pub fn rgb_to_image(rgb: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 127.5 - 1.0
    });
    ImageTensor::from_clamped(data)
}

pub fn mask_to_gray(m: &MaskTensor) -> GrayImage {
    let data = m.data();
    GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        image::Luma([(data[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

pub fn gray_to_mask(g: &GrayImage) -> Result<MaskTensor> {
    let (w, h) = g.dimensions();
    MaskTensor::new(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    }))
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn image_to_png(img: &ImageTensor) -> Result<Vec<u8>> {
    encode_png(DynamicImage::ImageRgb8(image_to_rgb(img)))
}

pub fn mask_to_png(m: &MaskTensor) -> Result<Vec<u8>> {
    encode_png(DynamicImage::ImageLuma8(mask_to_gray(m)))
}

/// Decodes any supported format into an RGB image, optionally resized to
/// `size`x`size`.
pub fn image_from_bytes(bytes: &[u8], size: Option<usize>) -> Result<ImageTensor> {
    let mut img = image::load_from_memory(bytes)?;
    if let Some(s) = size {
        if img.width() as usize != s || img.height() as usize != s {
            img = img.resize_exact(s as u32, s as u32, FilterType::Triangle);
        }
    }
    rgb_to_image(&img.to_rgb8())
}

/// Decodes a single-channel mask; colour inputs are converted to luma.
pub fn mask_from_bytes(bytes: &[u8], size: Option<usize>) -> Result<MaskTensor> {
    let mut img = image::load_from_memory(bytes)?;
    if let Some(s) = size {
        if img.width() as usize != s || img.height() as usize != s {
            img = img.resize_exact(s as u32, s as u32, FilterType::Nearest);
        }
    }
    gray_to_mask(&img.to_luma8())
}

pub fn load_image(path: &Path, size: Option<usize>) -> Result<ImageTensor> {
    image_from_bytes(&std::fs::read(path)?, size)
}

pub fn load_mask(path: &Path, size: Option<usize>) -> Result<MaskTensor> {
    mask_from_bytes(&std::fs::read(path)?, size)
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, image_to_png(img)?)?)
}

pub fn save_mask(m: &MaskTensor, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, mask_to_png(m)?)?)
}

/// Nearest-neighbour resize of a mask to `height`x`width`.
pub fn resize_mask_nearest(m: &MaskTensor, height: usize, width: usize) -> Result<MaskTensor> {
    let (h, w) = (m.height(), m.width());
    let src = m.data();
    MaskTensor::new(Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        src[[sy.min(h - 1), sx.min(w - 1)]]
    }))
}

pub fn to_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn from_base64(text: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| StampError::InvalidValue(format!("base64: {e}")))
}
