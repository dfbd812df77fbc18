//! Overlap metrics, PSNR, corpus evaluation and one-way ANOVA.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::{sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::models::TapNetwork;
use crate::nn::Mode;

/// Default probability threshold for binarizing predictions.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp / (tp + fp + fn)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        ratio_or_one(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `tp / (tp + fp)`; 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    /// `tp / (tp + fn)`; 1 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn dice_coef(c: &ConfusionCounts) -> f64 {
    c.dice()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

/// Pixelwise tallies of two binary masks.
pub fn confusion_counts(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "masks must be binary, found values ({p}, {g})"
                )))
            }
        }
    }
    Ok(c)
}

/// `10·log10(max² / MSE)` in dB; `+∞` for identical inputs.
pub fn psnr(recon: &[f64], image: &[f64], max_value: f64) -> Result<f64> {
    if recon.len() != image.len() {
        return Err(Error::Shape(format!(
            "psnr inputs have {} and {} elements",
            recon.len(),
            image.len()
        )));
    }
    if recon.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    let mse = recon
        .iter()
        .zip(image)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recon.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub iou: f64,
    pub dice: f64,
    pub recall: f64,
    pub precision: f64,
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let psnr = if n > 0 && per_image.iter().all(|m| m.psnr.is_some()) {
            Some(per_image.iter().map(|m| m.psnr.unwrap_or_default()).sum::<f64>() / n as f64)
        } else {
            None
        };
        let aggregate = AggregateMetrics {
            iou: mean(|m| m.iou),
            dice: mean(|m| m.dice),
            recall: mean(|m| m.recall),
            precision: mean(|m| m.precision),
            n_images: n,
            psnr,
        };
        Self { per_image, aggregate }
    }

    /// Per-image CSV: `id,iou,dice,precision,recall[,psnr]`.
    pub fn to_csv(&self) -> String {
        let with_psnr = self.aggregate.psnr.is_some();
        let mut out = String::from("id,iou,dice,precision,recall");
        if with_psnr {
            out.push_str(",psnr");
        }
        out.push('\n');
        for m in &self.per_image {
            let _ = write!(out, "{},{},{},{},{}", m.id, m.iou, m.dice, m.precision, m.recall);
            if let (true, Some(p)) = (with_psnr, m.psnr) {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }

    /// Summary JSON `{iou, dice, recall, precision, n_images[, psnr]}`.
    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.aggregate)
            .map_err(|e| Error::InvalidArgument(format!("serializing metrics: {e}")))
    }
}

/// Anything that turns a `(B, 3, H, W)` batch into segmentation logits and,
/// optionally, a reconstruction in [0, 1].
pub trait Segmenter {
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)>;
}

impl<T: TapNetwork + ?Sized> Segmenter for T {
    fn predict(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.forward_with_taps(images, Mode::Eval)?;
        Ok((out.seg_logits, out.recon))
    }
}

const EVAL_BATCH: usize = 8;

/// Thresholds `σ(logits)` and scores every image. PSNR (8-bit scale) is
/// included when the model produces reconstructions.
pub fn evaluate_model(model: &dyn Segmenter, dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    if !dataset.is_labeled() {
        return Err(Error::InvalidArgument("evaluation requires a labeled dataset".into()));
    }
    let device = Device::Cpu;
    let mut per_image = Vec::with_capacity(dataset.len());
    for batch in sequential_batches(dataset.len(), EVAL_BATCH) {
        let (images, _) = dataset.batch(&batch, &device)?;
        let (logits, recon) = model.predict(&images)?;
        let probs = candle_nn::ops::sigmoid(&logits.to_dtype(DType::F64)?)?;
        let (b, _, h, w) = probs.dims4()?;
        let probs = probs.flatten_all()?.to_vec1::<f64>()?;
        let recon = match recon {
            Some(r) => Some(r.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?),
            None => None,
        };
        for (k, &idx) in batch.iter().enumerate().take(b) {
            let sample = &dataset.samples[idx];
            let plane = &probs[k * h * w..(k + 1) * h * w];
            let pred = Array2::from_shape_fn((h, w), |(r, c)| u8::from(plane[r * w + c] > threshold));
            let gt = sample.mask.as_ref().expect("labeled");
            let counts = confusion_counts(&pred, gt)?;
            let psnr_db = match &recon {
                Some(rec) => {
                    let c = rec.len() / b;
                    let rec_img: Vec<f64> = rec[k * c..(k + 1) * c].iter().map(|v| v * 255.0).collect();
                    let src: Vec<f64> = std::iter::repeat(sample.image.iter())
                        .take(c / (h * w))
                        .flatten()
                        .map(|&v| v as f64)
                        .collect();
                    Some(psnr(&rec_img, &src, 255.0)?)
                }
                None => None,
            };
            per_image.push(ImageMetrics {
                id: sample.id(),
                iou: counts.iou(),
                dice: counts.dice(),
                precision: counts.precision(),
                recall: counts.recall(),
                psnr: psnr_db,
            });
        }
    }
    Ok(MetricsReport::from_images(per_image))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA across groups.
///
/// With zero within-group variance the F ratio is undefined; it is reported
/// as 0 (p = 1) when the group means also coincide and as `+∞` (p = 0)
/// otherwise.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("ANOVA needs at least two groups".into()));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "ANOVA group {i} has {} samples, need at least 2",
            g.len()
        )));
    }
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand).powi(2);
        ss_within += g.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    let df_between = k - 1;
    let df_within = n - k;
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;

    // Relative tolerance so that scaling every sample leaves the degenerate
    // branches unchanged.
    let scale = groups.iter().flatten().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let (f, p) = if ss_within <= 1e-24 * scale {
        if ss_between <= 1e-24 * scale {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
            .map_err(|e| Error::InvalidArgument(format!("F distribution: {e}")))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        f_statistic: f,
        p_value: p,
        df_between,
        df_within,
    })
}
