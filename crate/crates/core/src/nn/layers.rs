use candle_core::{DType, Tensor, Var, D};

use super::conv::{conv1x1, conv3x3, conv_transpose2x2};
use super::fused::batch_norm_train;
use super::params::{ParamBuilder, ParamKind};
use crate::error::{Error, Result};

/// Whether batch statistics or running statistics drive normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Square convolution with bias; kernel 3 (same padding) or 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    kernel: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::InvalidArgument(format!("unsupported kernel size {kernel}")));
        }
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = pb.uniform(format!("{prefix}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = pb.uniform(format!("{prefix}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = match self.kernel {
            3 => conv3x3(x, &self.weight)?,
            _ => conv1x1(x, &self.weight)?,
        };
        let c_out = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Kernel-2 stride-2 transposed convolution (doubles spatial size).
#[derive(Debug, Clone)]
pub struct UpConv {
    weight: Var,
    bias: Var,
}

impl UpConv {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * 4) as f64).sqrt();
        let weight = pb.uniform(format!("{prefix}.weight"), &[c_in, c_out, 2, 2], bound)?;
        let bias = pb.uniform(format!("{prefix}.bias"), &[c_out], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2x2(x, &self.weight)?;
        let c_out = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.constant(format!("{prefix}.weight"), &[channels], 1.0, ParamKind::Trainable)?,
            bias: pb.constant(format!("{prefix}.bias"), &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: pb.constant(format!("{prefix}.running_mean"), &[channels], 0.0, ParamKind::Buffer)?,
            running_var: pb.constant(format!("{prefix}.running_var"), &[channels], 1.0, ParamKind::Buffer)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_act(x, mode, false)
    }

    /// Normalization followed by ReLU when `relu` is set.
    pub fn forward_act(&self, x: &Tensor, mode: Mode, relu: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        match mode {
            Mode::Train => {
                let (y, mean, var) = batch_norm_train(x, &self.weight, &self.bias, self.eps, relu)?;
                self.update_running(&mean, &var, b * h * w)?;
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.running_mean.reshape((1, c, 1, 1))?;
                let var = self.running_var.reshape((1, c, 1, 1))?;
                let inv_std = (var + self.eps)?.sqrt()?.recip()?;
                let scale = self.weight.reshape((1, c, 1, 1))?.broadcast_mul(&inv_std)?;
                let shift = self.bias.reshape((1, c, 1, 1))?;
                let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&shift)?;
                Ok(if relu { y.relu()? } else { y })
            }
        }
    }

    fn update_running(&self, mean: &[f64], var: &[f64], n: usize) -> Result<()> {
        let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        let dtype = self.running_mean.dtype();
        let blend = |old: &Var, new: Vec<f64>| -> Result<()> {
            let old_v = old.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let v: Vec<f64> = old_v.iter().zip(&new).map(|(o, x)| o * (1.0 - m) + x * m).collect();
            old.set(&Tensor::from_vec(v, old.dims(), old.device())?.to_dtype(dtype)?)?;
            Ok(())
        };
        blend(&self.running_mean, mean.to_vec())?;
        blend(&self.running_var, var.iter().map(|v| v * unbiased).collect())
    }
}

/// Conv → BN → ReLU, repeated.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    layers: Vec<(Conv2d, BatchNorm2d)>,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize, convs: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(convs);
        for i in 0..convs {
            let cin = if i == 0 { c_in } else { c_out };
            let conv = Conv2d::new(pb, &format!("{prefix}.conv{i}"), cin, c_out, 3)?;
            let bn = BatchNorm2d::new(pb, &format!("{prefix}.bn{i}"), c_out)?;
            layers.push((conv, bn));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn) in &self.layers {
            h = bn.forward_act(&conv.forward(&h)?, mode, true)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: pb.uniform(format!("{prefix}.weight"), &[d_out, d_in], bound)?,
            bias: pb.uniform(format!("{prefix}.bias"), &[d_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Divides each row by its L2 norm, clamped below at `eps`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    // Clamping the squared norm keeps the gradient finite at zero rows.
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.clamp(eps * eps, f64::INFINITY)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}
