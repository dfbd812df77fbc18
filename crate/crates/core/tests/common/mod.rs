//! Oracles shared by the integration tests.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use contrakd::losses::{dice_bce_loss, dice_loss, feature_mse_loss, info_nce_loss, pmd_loss, recon_mse_loss};
use contrakd::nn::l2_normalize;
use contrakd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_SHAPE: (usize, usize, usize, usize) = (2, 1, 8, 8);

pub fn uniform(shape: (usize, usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn binary(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Relative L2 distance between the autograd gradient of `loss` at `x` and
/// its central finite-difference estimate with step `h`.
pub fn fd_relative_error(loss: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, h: f64) -> Result<f64> {
    let var = Var::from_tensor(&x.to_dtype(DType::F64)?)?;
    let grads = loss(var.as_tensor())?.backward()?;
    let analytic: Vec<f64> = match grads.get(&var) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; x.elem_count()],
    };
    let base: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(v, x.shape(), &Device::Cpu)?;
        Ok(loss(&t)?.to_scalar::<f64>()?)
    };
    let mut num = 0.0;
    let mut norm_fd = 0.0;
    let mut norm_ad = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        num += (fd - analytic[i]).powi(2);
        norm_fd += fd * fd;
        norm_ad += analytic[i] * analytic[i];
    }
    Ok(num.sqrt() / norm_fd.sqrt().max(norm_ad.sqrt()).max(1e-12))
}

/// Finite-difference checks of every training loss on random `2×1×8×8`
/// inputs. Returns `(loss name, relative error)`.
pub fn fd_check_all(h: f64, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = binary(GRAD_SHAPE, &mut rng);
    let probs = uniform(GRAD_SHAPE, 0.05, 0.95, &mut rng);
    let logits = uniform(GRAD_SHAPE, -3.0, 3.0, &mut rng);
    let image = uniform(GRAD_SHAPE, 0.0, 1.0, &mut rng);
    let teacher = uniform(GRAD_SHAPE, -1.0, 1.0, &mut rng);
    let other = l2_normalize(&uniform(GRAD_SHAPE, -1.0, 1.0, &mut rng).reshape((2, 64))?, 1e-12)?;

    let mut out = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor| -> Result<()> {
        out.push((name.to_string(), fd_relative_error(f, x, h)?));
        Ok(())
    };
    check("dice", &|p| dice_loss(p, &target), &probs)?;
    check("dice_bce", &|z| dice_bce_loss(z, &target), &logits)?;
    check("recon_mse", &|r| recon_mse_loss(r, &image), &probs)?;
    check(
        "info_nce",
        &|x| info_nce_loss(&l2_normalize(&x.reshape((2, 64))?, 1e-12)?, &other, 0.07),
        &logits,
    )?;
    check("feature_mse", &|s| feature_mse_loss(&teacher, s, None), &logits)?;
    check("pmd", &|s| pmd_loss(s, &teacher, 4.0), &logits)?;
    Ok(out)
}

/// Two-sided p-value of Student's t with four degrees of freedom, from its
/// closed-form CDF.
pub fn student_t4_two_sided_p(t: f64) -> f64 {
    let s = 1.0 + t * t / 4.0;
    let cdf = 0.5 + 0.375 * (t / s.sqrt()) * (1.0 - t * t / (12.0 * s));
    2.0 * (1.0 - cdf)
}

/// Upper tail of the F distribution with `(2, d2)` degrees of freedom.
pub fn f2_upper_tail(x: f64, d2: f64) -> f64 {
    (1.0 + 2.0 * x / d2).powf(-d2 / 2.0)
}
