//! 3×3 same-padding convolution lowered to im2col + one GEMM.
//!
//! The column matrix is laid out as `(C·9, B·H·W)` so that the whole batch
//! goes through a single `(C_out, C·9) × (C·9, B·H·W)` product. The whole
//! convolution is one graph node: its backward recomputes the columns, forms
//! both GEMM gradients and folds the column gradient back (col2im).

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

/// Unfolds `(B, C, H, W)` into `(C·9, B·H·W)` patches with zero padding 1.
struct Unfold3x3;

/// Folds `(C·9, B·H·W)` patches back into `(B, C, H, W)`, summing overlaps.
struct Fold3x3 {
    batch: usize,
    height: usize,
    width: usize,
}

/// Column range `[lo, hi)` of output pixels whose tap `k` (0, 1, 2) lands
/// inside a row of length `len`.
#[inline]
fn valid_span(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

fn unfold<T: Copy + Default>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::default(); c * 9 * b * hw];
    for ci in 0..c {
        for ky in 0..3 {
            let (y_lo, y_hi) = valid_span(ky, h);
            for kx in 0..3 {
                let (x_lo, x_hi) = valid_span(kx, w);
                if x_hi <= x_lo {
                    continue;
                }
                let row = ci * 9 + ky * 3 + kx;
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let dst = &mut out[(row * b + bi) * hw..(row * b + bi + 1) * hw];
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let s0 = sy * w + x_lo + kx - 1;
                        let n = x_hi - x_lo;
                        dst[y * w + x_lo..y * w + x_lo + n].copy_from_slice(&src[s0..s0 + n]);
                    }
                }
            }
        }
    }
    out
}

fn fold<T>(cols: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::AddAssign,
{
    let hw = h * w;
    let mut out = vec![T::default(); b * c * hw];
    for ci in 0..c {
        for ky in 0..3 {
            let (y_lo, y_hi) = valid_span(ky, h);
            for kx in 0..3 {
                let (x_lo, x_hi) = valid_span(kx, w);
                if x_hi <= x_lo {
                    continue;
                }
                let row = ci * 9 + ky * 3 + kx;
                for bi in 0..b {
                    let src = &cols[(row * b + bi) * hw..(row * b + bi + 1) * hw];
                    let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let d0 = sy * w + x_lo + kx - 1;
                        let s0 = y * w + x_lo;
                        let n = x_hi - x_lo;
                        for (d, s) in dst[d0..d0 + n].iter_mut().zip(&src[s0..s0 + n]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv3x3 expects a contiguous input"),
    }
}

impl CustomOp1 for Unfold3x3 {
    fn name(&self) -> &'static str {
        "unfold3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous_slice(v, layout)?, b, c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous_slice(v, layout)?, b, c, h, w)),
            other => candle_core::bail!("unfold3x3: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((c * 9, b * h * w))))
    }
}

impl CustomOp1 for Fold3x3 {
    fn name(&self) -> &'static str {
        "fold3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c9, _) = layout.shape().dims2()?;
        let (b, h, w) = (self.batch, self.height, self.width);
        let c = c9 / 9;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous_slice(v, layout)?, b, c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous_slice(v, layout)?, b, c, h, w)),
            other => candle_core::bail!("fold3x3: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Full 3×3 convolution as a single op over `(input, weight)`.
struct Conv3x3;

fn conv_forward<T: WithDType + Default>(
    x: &[T],
    weight: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    c_out: usize,
) -> candle_core::Result<Vec<T>> {
    let hw = h * w;
    let dev = candle_core::Device::Cpu;
    let cols = Tensor::from_vec(unfold(x, b, c, h, w), (c * 9, b * hw), &dev)?;
    let wm = Tensor::from_slice(weight, (c_out, c * 9), &dev)?;
    // (C_out, B, HW) -> (B, C_out, HW)
    wm.matmul(&cols)?
        .reshape((c_out, b, hw))?
        .transpose(0, 1)?
        .flatten_all()?
        .to_vec1::<T>()
}

impl CustomOp2 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (c_out, c_in, kh, kw) = l2.shape().dims4()?;
        if c_in != dims.1 || kh != 3 || kw != 3 {
            candle_core::bail!(
                "conv3x3: weight {:?} does not fit input {:?}",
                l2.shape().dims(),
                l1.shape().dims()
            );
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(wt)) => CpuStorage::F32(conv_forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(wt, l2)?,
                dims,
                c_out,
            )?),
            (CpuStorage::F64(x), CpuStorage::F64(wt)) => CpuStorage::F64(conv_forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(wt, l2)?,
                dims,
                c_out,
            )?),
            _ => candle_core::bail!("conv3x3: unsupported or mixed dtype {:?}", s1.dtype()),
        };
        Ok((out, Shape::from((dims.0, c_out, dims.2, dims.3))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c_in, h, w) = x.dims4()?;
        let c_out = weight.dim(0)?;
        let g = grad
            .transpose(0, 1)?
            .contiguous()?
            .reshape((c_out, b * h * w))?;
        let cols = x.contiguous()?.apply_op1_no_bwd(&Unfold3x3)?;
        let grad_w = g.matmul(&cols.t()?)?.reshape(weight.shape())?;
        let wm = weight.reshape((c_out, c_in * 9))?;
        let grad_cols = wm.t()?.matmul(&g)?;
        let grad_x = grad_cols.apply_op1_no_bwd(&Fold3x3 {
            batch: b,
            height: h,
            width: w,
        })?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// Same-padded 3×3 cross-correlation. `weight` is `(C_out, C_in, 3, 3)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv3x3)
}

/// 1×1 convolution. `weight` is `(C_out, C_in, 1, 1)`.
pub fn conv1x1(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let c_out = weight.dim(0)?;
    let flat = x.transpose(0, 1)?.contiguous()?.reshape((c_in, b * h * w))?;
    let out = weight.reshape((c_out, c_in))?.matmul(&flat)?;
    out.reshape((c_out, b, h, w))?.transpose(0, 1)?.contiguous()
}

/// Transposed convolution with kernel 2 and stride 2. `weight` is
/// `(C_in, C_out, 2, 2)`; each input pixel expands to a 2×2 output block.
pub fn conv_transpose2x2(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let c_out = weight.dim(1)?;
    let flat = x.transpose(0, 1)?.contiguous()?.reshape((c_in, b * h * w))?;
    let wm = weight.reshape((c_in, c_out * 4))?.t()?;
    let out = wm.matmul(&flat)?;
    // (c_out, ky, kx, b, h, w) -> (b, c_out, h, ky, w, kx)
    out.reshape(vec![c_out, 2, 2, b, h, w])?
        .permute(vec![3, 0, 4, 1, 5, 2])?
        .contiguous()?
        .reshape((b, c_out, h * 2, w * 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv3x3_matches_reference_conv() {
        let x = randn(&[2, 3, 5, 7], 1);
        let w = randn(&[4, 3, 3, 3], 2);
        let ours = conv3x3(&x, &w).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn conv3x3_gradients_match_reference_conv() {
        let x = Var::from_tensor(&randn(&[2, 3, 6, 4], 3)).unwrap();
        let w = Var::from_tensor(&randn(&[5, 3, 3, 3], 4)).unwrap();
        let g1 = conv3x3(&x, &w).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = x
            .conv2d(&w, 1, 1, 1, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &w] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap();
            let d = d.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "gradient differs by {d}");
        }
    }

    #[test]
    fn tiny_spatial_dims() {
        // 1×1 maps exercise the empty x-span branch.
        let x = randn(&[1, 2, 1, 1], 5);
        let w = randn(&[3, 2, 3, 3], 6);
        let ours = conv3x3(&x, &w).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn conv1x1_matches_reference_conv() {
        let x = randn(&[2, 3, 4, 4], 7);
        let w = randn(&[2, 3, 1, 1], 8);
        let ours = conv1x1(&x, &w).unwrap();
        let reference = x.conv2d(&w, 0, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn transpose_conv_matches_reference() {
        let x = randn(&[2, 3, 3, 4], 9);
        let w = randn(&[3, 5, 2, 2], 10);
        let ours = conv_transpose2x2(&x, &w).unwrap();
        let reference = x.conv_transpose2d(&w, 0, 0, 2, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        assert_eq!(x.dtype(), DType::F64);
    }
}
