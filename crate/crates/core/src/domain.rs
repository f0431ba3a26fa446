//! Value types shared by every stage of the pipeline, and the
//! compositing / cutout algebra that ties masks, textures and backgrounds
//! together.
//!
//! Images are channel-last `H x W x 3` arrays in `[-1, 1]`; masks are
//! single-channel `H x W` arrays in `[0, 1]`.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StampError};

/// An RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(StampError::Dimension(format!(
                "image must be HxWx3 with positive extent, got {h}x{w}x{c}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(StampError::InvalidValue(format!(
                "image value {v} outside [-1, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image, clamping every value into `[-1, 1]`. Non-finite
    /// values are still rejected.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Self::new(data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// `(1, 3, H, W)` tensor for network input.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w, _) = self.data.dim();
        let chw = self.data.view().permuted_axes([2, 0, 1]);
        let flat: Vec<f32> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Reads one `(3, H, W)` sample out of a `(B, 3, H, W)` or `(3, H, W)`
    /// network output. Values are clamped into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.get(0)?,
            3 => t.clone(),
            r => return Err(StampError::Dimension(format!("expected rank 3/4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(StampError::Dimension(format!("expected 3 channels, got {c}")));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let chw = Array3::from_shape_vec((c, h, w), flat)
            .map_err(|e| StampError::Dimension(e.to_string()))?;
        Self::from_clamped(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
    }
}

/// A single-channel mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    data: Array2<f32>,
    binary: bool,
}

impl MaskTensor {
    /// Values are clamped into `[0, 1]`; the binary flag is derived from
    /// the content.
    pub fn new(mut data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(StampError::Dimension("mask must have positive extent".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StampError::InvalidValue("non-finite mask value".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self { data, binary })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array2::zeros((height, width)), binary: true }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { data: Array2::ones((height, width)), binary: true }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.data.dim();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, 1, h, w), device)?.to_dtype(dtype)?)
    }

    /// Reads the first sample of a `(B, 1, H, W)`, `(1, H, W)` or `(H, W)`
    /// tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.get(0)?.get(0)?,
            3 => t.get(0)?,
            2 => t.clone(),
            r => return Err(StampError::Dimension(format!("expected rank 2-4, got {r}"))),
        };
        let (h, w) = t.dims2()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let data = Array2::from_shape_vec((h, w), flat)
            .map_err(|e| StampError::Dimension(e.to_string()))?;
        Self::new(data)
    }
}

/// Normalized box `(x1, y1, x2, y2)` and its rasterized mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    vec: [f32; 4],
    raster: MaskTensor,
}

impl BoundingBox {
    pub fn new(vec: [f32; 4], height: usize, width: usize) -> Result<Self> {
        let raster = rasterize_bbox(vec, height, width)?;
        Ok(Self { vec, raster })
    }

    pub fn vec(&self) -> [f32; 4] {
        self.vec
    }

    pub fn raster(&self) -> &MaskTensor {
        &self.raster
    }

    /// Half-open pixel ranges `(rows, cols)` covered by the box.
    pub fn pixel_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        pixel_ranges(self.vec, self.raster.height(), self.raster.width())
    }
}

/// A latent code conditioning one of the generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f32>);

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(StampError::Dimension("latent vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StampError::InvalidValue("non-finite latent value".into()));
        }
        Ok(Self(values))
    }

    /// Draws `dim` values from a standard normal.
    pub fn sample<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        Self((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// `(1 - alpha) * self + alpha * other`; exact at both endpoints.
    pub fn lerp(&self, other: &Self, alpha: f32) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(StampError::Dimension(format!(
                "cannot interpolate latents of dim {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
                .collect(),
        ))
    }

    /// `(1, dim)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.0.clone(), (1, self.0.len()), device)?.to_dtype(dtype)?)
    }
}

/// Everything produced by one stamp request.
#[derive(Debug, Clone, PartialEq)]
pub struct StampResult {
    pub mask: MaskTensor,
    pub texture: ImageTensor,
    pub composite: ImageTensor,
    pub z_mask: LatentVector,
    pub z_texture: LatentVector,
}

fn check_shape(i: &ImageTensor, m: &MaskTensor) -> Result<()> {
    if i.height() != m.height() || i.width() != m.width() {
        return Err(StampError::Dimension(format!(
            "image is {}x{} but mask is {}x{}",
            i.height(),
            i.width(),
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// `i * (1 - m) + s * m`, per pixel and channel.
///
/// The result is clamped to the elementwise envelope of `i` and `s`, which
/// the exact blend never leaves; this only absorbs last-bit rounding.
pub fn composite(i: &ImageTensor, s: &ImageTensor, m: &MaskTensor) -> Result<ImageTensor> {
    check_shape(i, m)?;
    if i.data.dim() != s.data.dim() {
        return Err(StampError::Dimension(format!(
            "background is {:?} but texture is {:?}",
            i.data.dim(),
            s.data.dim()
        )));
    }
    let mask = m.data.view().insert_axis(Axis(2));
    let mask = mask.broadcast(i.data.dim()).expect("mask broadcasts over channels");
    let mut out = Array3::<f32>::zeros(i.data.dim());
    Zip::from(&mut out)
        .and(&i.data)
        .and(&s.data)
        .and(&mask)
        .for_each(|o, &iv, &sv, &mv| {
            let v = iv * (1.0 - mv) + sv * mv;
            *o = v.clamp(iv.min(sv), iv.max(sv));
        });
    Ok(ImageTensor { data: out })
}

/// `i * (1 - m)`: zeroes the masked region.
pub fn cutout(i: &ImageTensor, m: &MaskTensor) -> Result<ImageTensor> {
    check_shape(i, m)?;
    let mut out = i.data.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v *= 1.0 - m.data[[y, x]];
    }
    Ok(ImageTensor { data: out })
}

/// `i * m`: keeps only the masked region.
pub fn apply_mask(i: &ImageTensor, m: &MaskTensor) -> Result<ImageTensor> {
    check_shape(i, m)?;
    let mut out = i.data.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v *= m.data[[y, x]];
    }
    Ok(ImageTensor { data: out })
}

fn pixel_ranges(
    vec: [f32; 4],
    height: usize,
    width: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let [x1, y1, x2, y2] = vec;
    let span = |a: f32, b: f32, n: usize| {
        let lo = ((a as f64) * n as f64).floor().max(0.0) as usize;
        let hi = ((b as f64) * n as f64).ceil().min(n as f64) as usize;
        lo.min(n)..hi
    };
    (span(y1, y2, height), span(x1, x2, width))
}

/// Binary mask with the box interior set to 1. Pixel intervals are
/// half-open: `floor(start * n) .. ceil(end * n)`.
pub fn rasterize_bbox(vec: [f32; 4], height: usize, width: usize) -> Result<MaskTensor> {
    if height == 0 || width == 0 {
        return Err(StampError::Dimension("raster must have positive extent".into()));
    }
    let [x1, y1, x2, y2] = vec;
    if vec.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(StampError::InvalidBox(format!("coordinates {vec:?} outside [0, 1]")));
    }
    if x1 >= x2 || y1 >= y2 {
        return Err(StampError::InvalidBox(format!("need x1 < x2 and y1 < y2, got {vec:?}")));
    }
    let (rows, cols) = pixel_ranges(vec, height, width);
    if rows.is_empty() || cols.is_empty() {
        return Err(StampError::InvalidBox(format!("{vec:?} has zero pixel area")));
    }
    let mut data = Array2::<f32>::zeros((height, width));
    data.slice_mut(ndarray::s![rows, cols]).fill(1.0);
    Ok(MaskTensor { data, binary: true })
}

/// 1 where `m > threshold`, else 0.
pub fn binarize(m: &MaskTensor, threshold: f32) -> Result<MaskTensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(StampError::InvalidValue(format!("threshold {threshold} not in (0, 1)")));
    }
    Ok(MaskTensor {
        data: m.data.mapv(|v| if v > threshold { 1.0 } else { 0.0 }),
        binary: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_from(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| f(y, x, c))).unwrap()
    }

    fn mask_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> MaskTensor {
        MaskTensor::new(Array2::from_shape_fn((h, w), |(y, x)| f(y, x))).unwrap()
    }

    #[test]
    fn composite_blend_identities() {
        let i = image_from(4, 5, |y, x, c| ((y + x + c) as f32 / 10.0) - 0.5);
        let s = image_from(4, 5, |y, x, c| 0.3 - ((y * x + c) as f32 / 40.0));
        assert_eq!(composite(&i, &s, &MaskTensor::ones(4, 5)).unwrap(), s);
        assert_eq!(composite(&i, &s, &MaskTensor::zeros(4, 5)).unwrap(), i);

        let i = ImageTensor::filled(3, 3, -1.0).unwrap();
        let s = ImageTensor::filled(3, 3, 1.0).unwrap();
        let half = mask_from(3, 3, |_, _| 0.5);
        let out = composite(&i, &s, &half).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let i = ImageTensor::filled(4, 4, 0.0).unwrap();
        let s = ImageTensor::filled(4, 4, 0.0).unwrap();
        assert!(matches!(
            composite(&i, &s, &MaskTensor::ones(4, 5)),
            Err(StampError::Dimension(_))
        ));
        let s = ImageTensor::filled(5, 4, 0.0).unwrap();
        assert!(composite(&i, &s, &MaskTensor::ones(4, 4)).is_err());
        assert!(cutout(&i, &MaskTensor::ones(3, 4)).is_err());
    }

    #[test]
    fn cutout_identities() {
        let i = image_from(6, 6, |y, x, c| ((y * 6 + x + c) as f32 / 50.0) - 0.4);
        assert_eq!(cutout(&i, &MaskTensor::zeros(6, 6)).unwrap(), i);
        let zeroed = cutout(&i, &MaskTensor::ones(6, 6)).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutout_composite_round_trip_with_binary_mask() {
        let i = image_from(8, 8, |y, x, c| ((y * 8 + x) as f32 * 0.013 + c as f32 * 0.1) - 0.6);
        let m = mask_from(8, 8, |y, x| if (2..6).contains(&y) && (1..5).contains(&x) { 1.0 } else { 0.0 });
        let hole = cutout(&i, &m).unwrap();
        let fg = apply_mask(&i, &m).unwrap();
        assert_eq!(composite(&hole, &fg, &m).unwrap(), i);
    }

    #[test]
    fn rasterize_examples() {
        let full = rasterize_bbox([0.0, 0.0, 1.0, 1.0], 16, 16).unwrap();
        assert_eq!(full.count_nonzero(), 256);

        let left = rasterize_bbox([0.0, 0.0, 0.5, 1.0], 64, 64).unwrap();
        assert_eq!(left.count_nonzero(), 2048);
        assert!(left.data().slice(ndarray::s![.., ..32]).iter().all(|&v| v == 1.0));
        assert!(left.data().slice(ndarray::s![.., 32..]).iter().all(|&v| v == 0.0));

        for bad in [[0.5, 0.0, 0.5, 1.0], [0.6, 0.0, 0.2, 1.0], [0.0, 0.0, 0.0, 0.0], [-0.1, 0.0, 0.5, 0.5]] {
            assert!(matches!(rasterize_bbox(bad, 64, 64), Err(StampError::InvalidBox(_))), "{bad:?}");
        }
    }

    #[test]
    fn rasterize_rounds_outward() {
        // floor(0.1 * 10) = 1, ceil(0.35 * 10) = 4
        let m = rasterize_bbox([0.1, 0.1, 0.35, 0.35], 10, 10).unwrap();
        assert_eq!(m.count_nonzero(), 9);
        assert_eq!(m.data()[[1, 1]], 1.0);
        assert_eq!(m.data()[[3, 3]], 1.0);
        assert_eq!(m.data()[[4, 4]], 0.0);
    }

    #[test]
    fn binarize_examples() {
        let lo = mask_from(4, 4, |_, _| 0.4);
        assert_eq!(binarize(&lo, 0.5).unwrap().count_nonzero(), 0);
        let hi = mask_from(4, 4, |_, _| 0.6);
        assert_eq!(binarize(&hi, 0.5).unwrap().count_nonzero(), 16);
        let checker = mask_from(4, 4, |y, x| if (x + y) % 2 == 0 { 0.8 } else { 0.2 });
        let b = binarize(&checker, 0.5).unwrap();
        assert!(b.is_binary());
        for ((y, x), &v) in b.data().indexed_iter() {
            assert_eq!(v, if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
        }
        assert!(binarize(&checker, 1.0).is_err());
        assert!(binarize(&checker, 0.0).is_err());
    }

    #[test]
    fn lerp_endpoints_exact() {
        let a = LatentVector::new(vec![0.1, -2.5, 3.75]).unwrap();
        let b = LatentVector::new(vec![1.3, 0.2, -0.7]).unwrap();
        assert_eq!(a.lerp(&b, 0.0).unwrap(), a);
        assert_eq!(a.lerp(&b, 1.0).unwrap(), b);
        let mid = a.lerp(&b, 0.5).unwrap();
        for ((m, x), y) in mid.values().iter().zip(a.values()).zip(b.values()) {
            assert_eq!(*m, (x + y) / 2.0);
        }
    }

    fn arb_case() -> impl Strategy<Value = (ImageTensor, ImageTensor, MaskTensor, MaskTensor)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                prop::collection::vec(-1.0f32..=1.0, n * 3),
                prop::collection::vec(-1.0f32..=1.0, n * 3),
                prop::collection::vec(0.0f32..=1.0, n),
                prop::collection::vec(prop::bool::ANY, n),
            )
                .prop_map(move |(i, s, m, b)| {
                    (
                        ImageTensor::new(Array3::from_shape_vec((h, w, 3), i).unwrap()).unwrap(),
                        ImageTensor::new(Array3::from_shape_vec((h, w, 3), s).unwrap()).unwrap(),
                        MaskTensor::new(Array2::from_shape_vec((h, w), m).unwrap()).unwrap(),
                        MaskTensor::new(
                            Array2::from_shape_vec((h, w), b.into_iter().map(|v| v as u8 as f32).collect())
                                .unwrap(),
                        )
                        .unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn composite_stays_in_envelope((i, s, m, _b) in arb_case()) {
            let out = composite(&i, &s, &m).unwrap();
            for ((o, a), b) in out.data().iter().zip(i.data()).zip(s.data()) {
                prop_assert!(*o >= a.min(*b) && *o <= a.max(*b));
            }
        }

        #[test]
        fn composite_idempotent_for_binary_masks((i, s, _m, b) in arb_case()) {
            let once = composite(&i, &s, &b).unwrap();
            prop_assert_eq!(composite(&once, &s, &b).unwrap(), once);
        }

        #[test]
        fn cutout_plus_masked_reconstructs((i, _s, m, b) in arb_case()) {
            // Exact for binary masks; soft masks reconstruct up to one rounding step.
            let sum = cutout(&i, &b).unwrap().into_data() + apply_mask(&i, &b).unwrap().into_data();
            prop_assert_eq!(&sum, i.data());
            let sum = cutout(&i, &m).unwrap().into_data() + apply_mask(&i, &m).unwrap().into_data();
            for (a, b) in sum.iter().zip(i.data()) {
                prop_assert!((a - b).abs() <= 2.0 * f32::EPSILON);
            }
        }
    }
}
