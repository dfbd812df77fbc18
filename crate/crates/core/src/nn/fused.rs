//! Training-mode batch normalization (optionally followed by ReLU) as a
//! single op with a hand-written backward pass.

use std::sync::{Arc, Mutex};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor, WithDType};

/// Per-channel batch mean and biased variance of the last forward pass.
type Stats = Arc<Mutex<Option<(Vec<f64>, Vec<f64>)>>>;

struct BatchNormTrain {
    eps: f64,
    relu: bool,
    stats: Stats,
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("batch_norm_train expects contiguous inputs"),
    }
}

fn channel_stats<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ci in 0..c {
        let mut s = 0f64;
        for bi in 0..b {
            s += x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .iter()
                .map(|v| v.to_f64())
                .sum::<f64>();
        }
        let m = s / n;
        let mut q = 0f64;
        for bi in 0..b {
            q += x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = q / n;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn forward<T: WithDType>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    b: usize,
    c: usize,
    hw: usize,
    eps: f64,
    relu: bool,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let (mean, var) = channel_stats(x, b, c, hw);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let scale = gamma[ci].to_f64() / (var[ci] + eps).sqrt();
        let shift = beta[ci].to_f64() - mean[ci] * scale;
        for bi in 0..b {
            let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
            for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                let y = v.to_f64() * scale + shift;
                *o = T::from_f64(if relu && y < 0.0 { 0.0 } else { y });
            }
        }
    }
    (out, mean, var)
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if l2.shape().elem_count() != c || l3.shape().elem_count() != c {
            candle_core::bail!("batch_norm_train: affine parameters must have {c} entries");
        }
        let (out, mean, var) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(be)) => {
                let (o, m, v) = forward(
                    contiguous(x, l1)?,
                    contiguous(g, l2)?,
                    contiguous(be, l3)?,
                    b,
                    c,
                    h * w,
                    self.eps,
                    self.relu,
                );
                (CpuStorage::F32(o), m, v)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(be)) => {
                let (o, m, v) = forward(
                    contiguous(x, l1)?,
                    contiguous(g, l2)?,
                    contiguous(be, l3)?,
                    b,
                    c,
                    h * w,
                    self.eps,
                    self.relu,
                );
                (CpuStorage::F64(o), m, v)
            }
            _ => candle_core::bail!("batch_norm_train: unsupported or mixed dtype {:?}", s1.dtype()),
        };
        *self.stats.lock().expect("stats lock") = Some((mean, var));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let n = (b * hw) as f64;
        let flat = |t: &Tensor| -> candle_core::Result<Vec<f64>> {
            t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()
        };
        let (xs, gs, ys, dy) = (flat(x)?, flat(gamma)?, flat(res)?, flat(grad)?);
        let (mean, var) = {
            let (m, v) = channel_stats(&xs, b, c, hw);
            (m, v)
        };
        let mut dx = vec![0f64; xs.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for ci in 0..c {
            let inv_std = 1.0 / (var[ci] + self.eps).sqrt();
            let (mut sg, mut sgx) = (0f64, 0f64);
            for bi in 0..b {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for i in r {
                    let g = if self.relu && ys[i] <= 0.0 { 0.0 } else { dy[i] };
                    sg += g;
                    sgx += g * (xs[i] - mean[ci]) * inv_std;
                }
            }
            dbeta[ci] = sg;
            dgamma[ci] = sgx;
            let k = gs[ci] * inv_std;
            for bi in 0..b {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for i in r {
                    let g = if self.relu && ys[i] <= 0.0 { 0.0 } else { dy[i] };
                    let xhat = (xs[i] - mean[ci]) * inv_std;
                    dx[i] = k * (g - sg / n - xhat * sgx / n);
                }
            }
        }
        let dtype = x.dtype();
        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dtype)?;
        let dgamma = Tensor::from_vec(dgamma, gamma.shape(), dev)?.to_dtype(dtype)?;
        let dbeta = Tensor::from_vec(dbeta, gamma.shape(), dev)?.to_dtype(dtype)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Normalizes `x` with its own per-channel batch statistics, applies the
/// affine `gamma`, `beta` and, if `relu`, clamps at zero. Also returns the
/// batch mean and biased variance per channel.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    relu: bool,
) -> candle_core::Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let stats: Stats = Arc::default();
    let op = BatchNormTrain {
        eps,
        relu,
        stats: stats.clone(),
    };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let (mean, var) = stats
        .lock()
        .expect("stats lock")
        .take()
        .expect("forward records statistics");
    Ok((y, mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn reference(x: &Tensor, g: &Tensor, b: &Tensor, relu: bool) -> Tensor {
        let c = g.dim(0).unwrap();
        let mean = x.mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let cen = x.broadcast_sub(&mean).unwrap();
        let var = cen.sqr().unwrap().mean_keepdim(0).unwrap().mean_keepdim(2).unwrap().mean_keepdim(3).unwrap();
        let inv = (var + 1e-5).unwrap().sqrt().unwrap().recip().unwrap();
        let y = cen
            .broadcast_mul(&inv)
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap();
        if relu {
            y.relu().unwrap()
        } else {
            y
        }
    }

    #[test]
    fn matches_composite_forward_and_gradients() {
        for relu in [false, true] {
            let x = Var::from_tensor(&randn(&[3, 4, 5, 6], 1)).unwrap();
            let g = Var::from_tensor(&(randn(&[4], 2) + 1.5).unwrap()).unwrap();
            let b = Var::from_tensor(&randn(&[4], 3)).unwrap();
            let weights = randn(&[3, 4, 5, 6], 4);
            let (ours, mean, _) = batch_norm_train(&x, &g, &b, 1e-5, relu).unwrap();
            let theirs = reference(&x, &g, &b, relu);
            let d = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "forward differs by {d}");
            assert_eq!(mean.len(), 4);
            let g1 = (ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (theirs * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &g, &b] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap();
                let d = d.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "gradient differs by {d} (relu {relu})");
            }
        }
    }
}
