//! Convolution lowering: `im2col` unfolds `(B, C, H, W)` patches into a
//! `(C*k*k, B, Ho*Wo)` matrix so a convolution becomes a single matmul, and
//! `col2im` is its adjoint (scatter-add back into image layout). Each is
//! registered as a differentiable op whose backward pass is the other.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((self.rows(), self.batch, self.out_height() * self.out_width()))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.height, self.width))
    }

    /// Calls `f(col_index, image_index)` for every in-bounds patch element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let n = self.batch * ho * wo;
        let k = self.kernel;
        let pad = self.padding as isize;
        for ci in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row_off = ((ci * k + ki) * k + kj) * n;
                    for bi in 0..self.batch {
                        let src_off = (bi * self.channels + ci) * self.height * self.width;
                        let dst_off = row_off + bi * ho * wo;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ki) as isize - pad;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let src_row = src_off + iy as usize * self.width;
                            let dst_row = dst_off + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kj) as isize - pad;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(dst_row + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut dst = vec![T::default(); self.cols_shape().elem_count()];
        self.for_each(|d, s| dst[d] = src[s]);
        dst
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut dst = vec![T::default(); self.image_shape().elem_count()];
        self.for_each(|c, s| dst[s] += cols[c]);
        dst
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops require contiguous input"),
    }
}

struct Im2Col(PatchGeometry);
struct Col2Im(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.shape() != &self.0.image_shape() {
            candle_core::bail!("im2col: input {:?} does not match {:?}", layout.shape(), self.0)
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.unfold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.unfold(contiguous_slice(v, layout)?)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(col2im(&grad_res.contiguous()?, self.0)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if layout.shape() != &self.0.cols_shape() {
            candle_core::bail!("col2im: input {:?} does not match {:?}", layout.shape(), self.0)
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.fold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.fold(contiguous_slice(v, layout)?)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, self.0.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(im2col(&grad_res.contiguous()?, self.0)?))
    }
}

pub fn im2col(x: &Tensor, geometry: PatchGeometry) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col(geometry))
}

pub fn col2im(cols: &Tensor, geometry: PatchGeometry) -> Result<Tensor> {
    cols.contiguous()?.apply_op1(Col2Im(geometry))
}

/// 2-D convolution of `x: (B, C, H, W)` with `weight: (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kernel, kernel2) = weight.dims4()?;
    if in_c != channels || kernel != kernel2 {
        candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", weight.shape(), x.shape())
    }
    let geometry = PatchGeometry { batch, channels, height, width, kernel, stride, padding };
    let (ho, wo) = (geometry.out_height(), geometry.out_width());
    let cols = im2col(x, geometry)?.reshape((channels * kernel * kernel, batch * ho * wo))?;
    weight
        .reshape((out_c, channels * kernel * kernel))?
        .matmul(&cols)?
        .reshape((out_c, batch, ho, wo))?
        .transpose(0, 1)?
        .contiguous()
}
