//! Differentiable objectives for teacher training and distillation.
//!
//! Every loss takes and returns candle tensors so it works unchanged in `f32`
//! training and `f64` gradient checks. Scalars come back as rank-0 tensors.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FeatureAdapter, FeatureTaps, Projector, Scale};

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Allowed deviation of embedding norms from 1 in [`info_nce_loss`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `1 − (2 Σ p·t + ε) / (Σ p + Σ t + ε)` over every element of the batch.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(probs, target, "dice_loss")?;
    let target = target.to_dtype(probs.dtype())?;
    let inter = (probs * &target)?.sum_all()?;
    let denom = ((probs.sum_all()? + target.sum_all()?)? + DICE_SMOOTH)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(z, 0) − z·t + ln(1 + e^{−|z|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "bce_with_logits")?;
    let target = target.to_dtype(logits.dtype())?;
    let softplus_neg_abs = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * &target)?)? + softplus_neg_abs)?;
    Ok(loss.mean_all()?)
}

/// `dice_loss(σ(z), t) + BCE(z, t)`, both terms weighted 1.
pub fn dice_bce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "dice_bce_loss")?;
    let probs = candle_nn::ops::sigmoid(logits)?;
    Ok((dice_loss(&probs, target)? + bce_with_logits(logits, target)?)?)
}

/// Mean squared error between a reconstruction and its source image.
pub fn recon_mse_loss(recon: &Tensor, image: &Tensor) -> Result<Tensor> {
    same_shape(recon, image, "recon_mse_loss")?;
    Ok((recon - image)?.sqr()?.mean_all()?)
}

/// Values that loss weighting can combine: plain numbers or scalar tensors.
pub trait LossValue: Clone {
    fn scaled(&self, w: f64) -> Result<Self>;
    fn plus(&self, other: &Self) -> Result<Self>;
    fn value(&self) -> Result<f64>;
}

impl LossValue for f64 {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok(self * w)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }
    fn value(&self) -> Result<f64> {
        Ok(*self)
    }
}

impl LossValue for Tensor {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok((self * w)?)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }
    fn value(&self) -> Result<f64> {
        Ok(self.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// `seg + λ_rec · recon`.
pub fn teacher_total_loss<V: LossValue>(seg: &V, recon: &V, lambda_rec: f64) -> Result<V> {
    seg.plus(&recon.scaled(lambda_rec)?)
}

fn check_unit_rows(x: &Tensor, what: &str) -> Result<()> {
    let norms = x.sqr()?.sum(D::Minus1)?.sqrt()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some((i, n)) = norms
        .iter()
        .enumerate()
        .find(|(_, n)| !((*n - 1.0).abs() <= UNIT_NORM_TOLERANCE))
    {
        return Err(Error::InvalidArgument(format!(
            "{what} row {i} has norm {n}, expected unit norm"
        )));
    }
    Ok(())
}

/// InfoNCE with in-batch negatives.
///
/// Row `i` of `anchors` is scored against every row of `positives` by
/// `exp(a_i·p_j / τ)`; the matching row `p_i` is the positive. The loss is the
/// mean over anchors of the softmax cross-entropy of the positive.
pub fn info_nce_loss(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<Tensor> {
    same_shape(anchors, positives, "info_nce_loss")?;
    let (b, _) = anchors.dims2()?;
    if b == 0 {
        return Err(Error::InvalidArgument("info_nce_loss needs at least one row".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    check_unit_rows(anchors, "anchor")?;
    check_unit_rows(positives, "positive")?;
    let logits = (anchors.matmul(&positives.t()?)? / tau)?;
    let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(b, log_probs.dtype(), log_probs.device())?;
    let positive_terms = (log_probs * eye)?.sum_all()?;
    Ok((positive_terms / -(b as f64))?)
}

/// Projection heads for one scale. The teacher side may reuse the student's
/// projector when both taps have the same channel count.
#[derive(Debug, Clone)]
pub struct ProjectorPair {
    pub student: Projector,
    pub teacher: Option<Projector>,
}

impl ProjectorPair {
    pub fn shared(projector: Projector) -> Self {
        Self {
            student: projector,
            teacher: None,
        }
    }

    pub fn teacher_side(&self) -> &Projector {
        self.teacher.as_ref().unwrap_or(&self.student)
    }
}

/// InfoNCE between projected student (anchor) and teacher (positive) taps at
/// one scale. The teacher tap is detached.
pub fn scale_contrastive_loss(
    teacher_taps: &FeatureTaps,
    student_taps: &FeatureTaps,
    projectors: &ProjectorPair,
    scale: Scale,
    tau: f64,
) -> Result<Tensor> {
    for (side, p) in [("student", &projectors.student), ("teacher", projectors.teacher_side())] {
        if p.scale != scale {
            return Err(Error::InvalidArgument(format!(
                "{side} projector is for the {} scale, requested {scale}",
                p.scale
            )));
        }
    }
    let anchors = projectors.student.project(student_taps.get(scale))?;
    let positives = projectors.teacher_side().project(&teacher_taps.get(scale).detach())?;
    info_nce_loss(&anchors, &positives, tau)
}

/// Mean squared difference between a teacher tap and the (optionally adapted)
/// student tap. The teacher tap is detached.
pub fn feature_mse_loss(teacher_tap: &Tensor, student_tap: &Tensor, adapter: Option<&FeatureAdapter>) -> Result<Tensor> {
    let adapted = match adapter {
        Some(a) => a.forward(student_tap)?,
        None => student_tap.clone(),
    };
    same_shape(&adapted, teacher_tap, "feature_mse_loss (after adapter)")?;
    Ok((adapted - teacher_tap.detach())?.sqr()?.mean_all()?)
}

/// Two-class logit pair `(z / T, 0)` per pixel, as `(N, 2)`.
fn softened_pairs(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let z = (logits.flatten_all()? / temperature)?;
    let zeros = z.zeros_like()?;
    Ok(Tensor::stack(&[&z, &zeros], 1)?)
}

/// Prediction-map distillation: `T² · mean_pixels KL(softmax(t/T) ‖ softmax(s/T))`,
/// where each pixel's single logit `z` is expanded to the pair `(z, 0)`.
/// The teacher logits are detached.
pub fn pmd_loss(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "PMD temperature must be > 0, got {temperature}"
        )));
    }
    same_shape(student_logits, teacher_logits, "pmd_loss")?;
    let log_s = candle_nn::ops::log_softmax(&softened_pairs(student_logits, temperature)?, 1)?;
    let log_t = candle_nn::ops::log_softmax(&softened_pairs(&teacher_logits.detach(), temperature)?, 1)?;
    let p_t = log_t.exp()?;
    let kl = (p_t * (log_t - log_s)?)?.sum(1)?.mean_all()?;
    Ok((kl * (temperature * temperature))?)
}

/// Weights of the distillation objective and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_enc: f64,
    pub w_bn: f64,
    pub w_dec: f64,
    /// Reconstruction weight for teacher training.
    pub lambda_rec: f64,
    pub pmd_enabled: bool,
    pub pmd_temperature: f64,
    pub contrastive_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_seg: 1.0,
            w_enc: 0.1,
            w_bn: 0.1,
            w_dec: 0.1,
            lambda_rec: 1.0,
            pmd_enabled: false,
            pmd_temperature: 4.0,
            contrastive_temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn scale_weight(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Encoder => self.w_enc,
            Scale::Bottleneck => self.w_bn,
            Scale::Decoder => self.w_dec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_seg", self.w_seg),
            ("w_enc", self.w_enc),
            ("w_bn", self.w_bn),
            ("w_dec", self.w_dec),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        for (name, t) in [
            ("pmd_temperature", self.pmd_temperature),
            ("contrastive_temperature", self.contrastive_temperature),
        ] {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Raw loss components of one step, before weighting.
#[derive(Debug, Clone)]
pub struct LossTerms<V> {
    pub seg: Option<V>,
    pub recon: Option<V>,
    pub con_enc: Option<V>,
    pub con_bn: Option<V>,
    pub con_dec: Option<V>,
    pub pmd: Option<V>,
}

impl<V> Default for LossTerms<V> {
    fn default() -> Self {
        Self {
            seg: None,
            recon: None,
            con_enc: None,
            con_bn: None,
            con_dec: None,
            pmd: None,
        }
    }
}

impl<V> LossTerms<V> {
    pub fn scale(&self, scale: Scale) -> Option<&V> {
        match scale {
            Scale::Encoder => self.con_enc.as_ref(),
            Scale::Bottleneck => self.con_bn.as_ref(),
            Scale::Decoder => self.con_dec.as_ref(),
        }
    }

    pub fn set_scale(&mut self, scale: Scale, v: V) {
        match scale {
            Scale::Encoder => self.con_enc = Some(v),
            Scale::Bottleneck => self.con_bn = Some(v),
            Scale::Decoder => self.con_dec = Some(v),
        }
    }
}

/// Per-component loss values of one step (or an average of steps). In
/// feature-MSE runs the `con_*` slots hold the feature-MSE values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub recon: Option<f64>,
    pub con_enc: Option<f64>,
    pub con_bn: Option<f64>,
    pub con_dec: Option<f64>,
    pub pmd: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn scale(&self, scale: Scale) -> Option<f64> {
        match scale {
            Scale::Encoder => self.con_enc,
            Scale::Bottleneck => self.con_bn,
            Scale::Decoder => self.con_dec,
        }
    }

    /// Weighted sum of the present components.
    pub fn recombine(&self, w: &ComponentWeights) -> f64 {
        w.seg * self.seg
            + w.recon * self.recon.unwrap_or(0.0)
            + w.enc * self.con_enc.unwrap_or(0.0)
            + w.bn * self.con_bn.unwrap_or(0.0)
            + w.dec * self.con_dec.unwrap_or(0.0)
            + w.pmd * self.pmd.unwrap_or(0.0)
    }

    /// Component-wise mean; `None` components stay `None` only if absent everywhere.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg_opt = |f: fn(&LossBreakdown) -> Option<f64>| {
            let present: Vec<f64> = items.iter().filter_map(f).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / n)
        };
        LossBreakdown {
            seg: items.iter().map(|b| b.seg).sum::<f64>() / n,
            recon: avg_opt(|b| b.recon),
            con_enc: avg_opt(|b| b.con_enc),
            con_bn: avg_opt(|b| b.con_bn),
            con_dec: avg_opt(|b| b.con_dec),
            pmd: avg_opt(|b| b.pmd),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

/// Multipliers that turn a [`LossBreakdown`] into its total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub seg: f64,
    pub recon: f64,
    pub enc: f64,
    pub bn: f64,
    pub dec: f64,
    pub pmd: f64,
}

impl ComponentWeights {
    pub fn teacher(lambda_rec: f64) -> Self {
        Self {
            seg: 1.0,
            recon: lambda_rec,
            enc: 0.0,
            bn: 0.0,
            dec: 0.0,
            pmd: 0.0,
        }
    }

    pub fn supervised() -> Self {
        Self::teacher(0.0)
    }

    pub fn student(w: &LossWeights) -> Self {
        Self {
            seg: w.w_seg,
            recon: 0.0,
            enc: w.w_enc,
            bn: w.w_bn,
            dec: w.w_dec,
            pmd: if w.pmd_enabled { 1.0 } else { 0.0 },
        }
    }
}

/// `w_seg·seg + Σ_active w_scale·con_scale + pmd` (PMD unweighted).
///
/// `active` lists the scales the plan distills; their terms (and PMD when
/// enabled) must be present. Terms that are present but not active are
/// ignored.
pub fn student_total_loss<V: LossValue>(
    terms: &LossTerms<V>,
    weights: &LossWeights,
    active: &[Scale],
) -> Result<(V, LossBreakdown)> {
    let seg = terms
        .seg
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("segmentation term missing".into()))?;
    let mut total = seg.scaled(weights.w_seg)?;
    let mut breakdown = LossBreakdown {
        seg: seg.value()?,
        ..Default::default()
    };
    for &scale in Scale::ALL.iter().filter(|s| active.contains(s)) {
        let term = terms
            .scale(scale)
            .ok_or_else(|| Error::InvalidArgument(format!("{scale} distillation term missing")))?;
        total = total.plus(&term.scaled(weights.scale_weight(scale))?)?;
        let v = Some(term.value()?);
        match scale {
            Scale::Encoder => breakdown.con_enc = v,
            Scale::Bottleneck => breakdown.con_bn = v,
            Scale::Decoder => breakdown.con_dec = v,
        }
    }
    if weights.pmd_enabled {
        let pmd = terms
            .pmd
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("PMD enabled but its term is missing".into()))?;
        total = total.plus(pmd)?;
        breakdown.pmd = Some(pmd.value()?);
    }
    breakdown.total = total.value()?;
    Ok((total, breakdown))
}
