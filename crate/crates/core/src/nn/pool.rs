//! 2×2 stride-2 max pooling whose gradient flows only to the selected
//! element of each window (the first maximum in row-major order).

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

struct MaxPool2x2;

/// Flat input index of the winning element of every output cell.
fn argmax_indices<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn pool<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    argmax_indices(x, planes, h, w).into_iter().map(|k| x[k]).collect()
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max_pool2x2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("max_pool2x2 expects a contiguous input")
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(pool(&v[start..end], b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(pool(&v[start..end], b * c, h, w)),
            other => candle_core::bail!("max_pool2x2: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let x: Vec<f64> = arg.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let g: Vec<f64> = grad.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let mut dx = vec![0f64; x.len()];
        for (k, gv) in argmax_indices(&x, b * c, h, w).into_iter().zip(g) {
            dx[k] += gv;
        }
        let dx = Tensor::from_vec(dx, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(dx))
    }
}

/// Max pooling with a 2×2 window and stride 2; odd trailing rows and
/// columns are dropped.
pub fn max_pool2x2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2x2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn forward_matches_reference_pooling() {
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 7), &Device::Cpu).unwrap();
        let ours = max_pool2x2(&x).unwrap();
        let reference = x.max_pool2d(2).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        let d = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn gradient_goes_to_the_window_maximum() {
        let x = Var::from_tensor(
            &Tensor::from_vec(vec![1.0f64, 5.0, 2.0, 3.0, 4.0, 0.0, 7.0, 7.0], (1, 1, 2, 4), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let y = max_pool2x2(&x).unwrap();
        let g = (y * Tensor::new(&[[[[2.0f64, 3.0]]]], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gx: Vec<f64> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gx, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
    }
}
