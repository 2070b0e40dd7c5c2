//! Convolution as im2col + matmul, with gradient-capable custom ops.
//!
//! Both directions run through gemm: the forward pass multiplies the reshaped
//! kernel with the unfolded input, and the input gradient folds the column
//! gradient back with col2im.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(row, col, input_index)` for every in-bounds (column entry, input pixel) pair.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let l = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for b in 0..self.n {
                        let plane = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = plane + iy as usize * self.w;
                            let col0 = b * l + oy * self.ow;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(row, col0 + ox, base + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im require contiguous input"),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let g = self.0;
        let ncols = g.cols();
        let mut dst = vec![T::zero(); g.rows() * ncols];
        g.for_each(|row, col, i| dst[row * ncols + col] = src[i]);
        dst
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from((self.0.rows(), self.0.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let g = self.0;
        let ncols = g.cols();
        let mut dst = vec![T::zero(); g.n * g.c * g.h * g.w];
        g.for_each(|row, col, i| dst[i] += src[row * ncols + col]);
        dst
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2D convolution of `(N, C_in, H, W)` with an `(C_out, C_in, k, k)` kernel, plus bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        return Err(Error::shape("conv2d kernel", ("_", c, k, k), weight.dims()));
    }
    if h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(Error::shape(
            "conv2d input",
            format!(">= {k} after padding"),
            x.dims(),
        ));
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad: padding,
        oh: (h + 2 * padding - k) / stride + 1,
        ow: (w + 2 * padding - k) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((c_out, g.rows()))?.matmul(&cols)?;
    let y = y.broadcast_add(&bias.reshape((c_out, 1))?)?;
    Ok(y.reshape((c_out, n, g.oh, g.ow))?.transpose(0, 1)?.contiguous()?)
}

struct Upsample2x {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Upsample2x {
    fn run<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut dst = vec![T::zero(); self.n * self.c * 4 * h * w];
        for p in 0..self.n * self.c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[y * 2 * w + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        dst
    }
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from((self.n, self.c, 2 * self.h, 2 * self.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("upsample2x: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // Each input pixel feeds a 2x2 block: its gradient is the block sum.
        let (n, c, h, w) = (self.n, self.c, self.h, self.w);
        let g = grad.reshape((n, c, h, 2, w, 2))?.sum(5)?.sum(3)?;
        Ok(Some(g))
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x { n, c, h, w })?)
}
