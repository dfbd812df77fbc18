//! Training engines: multi-task teacher training, supervised student
//! training and frozen-teacher distillation, all driven by one epoch loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{epoch_batches, sequential_batches, validate_fraction, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    dice_bce_loss, dice_loss, feature_mse_loss, pmd_loss, recon_mse_loss, scale_contrastive_loss,
    student_total_loss, teacher_total_loss, ComponentWeights, LossBreakdown, LossTerms, LossValue, LossWeights,
    ProjectorPair,
};
use crate::models::{
    FeatureAdapter, FrozenModel, ModelConfig, Projector, Role, Scale, TapNetwork, UNet, DEFAULT_EMBED_DIM,
};
use crate::nn::{Mode, ParamStore};
use crate::optim::{Optimizer, OptimizerConfig};

/// Share of training subjects held out for validation curves.
pub const VALIDATION_FRACTION: f64 = 0.1;

pub const RECORD_CSV_HEADER: &str = "epoch,train_total,val_total,seg,recon,con_enc,con_bn,con_dec,pmd,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Share of training subjects used, in (0, 1].
    pub data_fraction: f64,
}

impl TrainOptions {
    /// 200 epochs of AdamW (lr 1e-4), batch 8, all data.
    pub fn teacher() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            optimizer: OptimizerConfig::adamw(),
            seed: 0,
            data_fraction: 1.0,
        }
    }

    /// 120 epochs of RMSProp, batch 8, half the subjects.
    pub fn student() -> Self {
        Self {
            epochs: 120,
            batch_size: 8,
            optimizer: OptimizerConfig::rmsprop(),
            seed: 0,
            data_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        validate_fraction(self.data_fraction)
    }
}

/// Splits `dataset` into training and validation subjects.
pub fn holdout_split(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    dataset.split_validation(VALIDATION_FRACTION, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub seconds: f64,
}

/// Per-epoch loss curves of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub label: String,
    pub seed: u64,
    pub data_fraction: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub weights: ComponentWeights,
    pub rows: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::InvalidArgument(format!("record line {line}: `{s}` is not a number")))
}

impl TrainingRecord {
    pub fn final_row(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RECORD_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = &r.train;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                t.total,
                opt_cell(r.val.map(|v| v.total)),
                t.seg,
                opt_cell(t.recon),
                opt_cell(t.con_enc),
                opt_cell(t.con_bn),
                opt_cell(t.con_dec),
                opt_cell(t.pmd),
                r.seconds
            );
        }
        out
    }

    /// Parses the rows of a record CSV. Run metadata is not part of the CSV,
    /// so it is taken from the arguments.
    pub fn rows_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == RECORD_CSV_HEADER => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unexpected record header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 10 {
                return Err(Error::InvalidArgument(format!(
                    "record line {}: expected 10 cells, found {}",
                    i + 2,
                    cells.len()
                )));
            }
            let num = |k: usize| parse_cell(cells[k], i + 2);
            let epoch = cells[0]
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("record line {}: bad epoch", i + 2)))?;
            rows.push(EpochRecord {
                epoch,
                train: LossBreakdown {
                    total: num(1)?.unwrap_or(f64::NAN),
                    seg: num(3)?.unwrap_or(f64::NAN),
                    recon: num(4)?,
                    con_enc: num(5)?,
                    con_bn: num(6)?,
                    con_dec: num(7)?,
                    pmd: num(8)?,
                },
                val: num(2)?.map(|total| LossBreakdown {
                    total,
                    ..Default::default()
                }),
                seconds: num(9)?.unwrap_or(0.0),
            });
        }
        Ok(rows)
    }

    /// Largest gap between a row's stored total and the weighted sum of its
    /// stored components.
    pub fn max_recombination_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.train.total - r.train.recombine(&self.weights)).abs())
            .fold(0.0, f64::max)
    }

    /// Equality of every loss value, ignoring wall-clock time.
    pub fn same_losses(&self, other: &TrainingRecord) -> bool {
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.epoch == b.epoch && a.train == b.train && a.val == b.val)
    }
}

/// A differentiable training objective over one labeled batch.
pub trait Objective {
    /// Returns the scalar to minimize and its per-component values.
    fn loss(&self, images: &Tensor, masks: &Tensor, mode: Mode) -> Result<(Tensor, LossBreakdown)>;

    /// Everything the optimizer updates.
    fn trainable_vars(&self) -> Vec<Var>;

    fn component_weights(&self) -> ComponentWeights;
}

/// `dice_bce + λ_rec · MSE` on a multi-task network.
pub struct TeacherObjective {
    pub model: UNet,
    pub lambda_rec: f64,
}

impl TeacherObjective {
    pub fn new(model: UNet, lambda_rec: f64) -> Result<Self> {
        if model.config().role != Role::TeacherMtUnet || !model.config().with_recon_head {
            return Err(Error::InvalidArgument(
                "teacher training needs a teacher network with a reconstruction head".into(),
            ));
        }
        if !lambda_rec.is_finite() || lambda_rec < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda_rec must be finite and >= 0, got {lambda_rec}")));
        }
        Ok(Self { model, lambda_rec })
    }
}

impl Objective for TeacherObjective {
    fn loss(&self, images: &Tensor, masks: &Tensor, mode: Mode) -> Result<(Tensor, LossBreakdown)> {
        let out = self.model.forward_with_taps(images, mode)?;
        let seg = dice_bce_loss(&out.seg_logits, masks)?;
        let recon_map = out.recon.ok_or_else(|| Error::InvalidArgument("teacher produced no reconstruction".into()))?;
        let recon = recon_mse_loss(&recon_map, images)?;
        let total = teacher_total_loss(&seg, &recon, self.lambda_rec)?;
        let breakdown = LossBreakdown {
            seg: seg.value()?,
            recon: Some(recon.value()?),
            total: total.value()?,
            ..Default::default()
        };
        Ok((total, breakdown))
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.model.trainable_vars()
    }

    fn component_weights(&self) -> ComponentWeights {
        ComponentWeights::teacher(self.lambda_rec)
    }
}

/// Plain soft-Dice loss on a student.
pub struct DiceObjective {
    pub model: UNet,
}

impl DiceObjective {
    pub fn new(model: UNet) -> Self {
        Self { model }
    }
}

impl Objective for DiceObjective {
    fn loss(&self, images: &Tensor, masks: &Tensor, mode: Mode) -> Result<(Tensor, LossBreakdown)> {
        let out = self.model.forward_with_taps(images, mode)?;
        let seg = dice_loss(&candle_nn::ops::sigmoid(&out.seg_logits)?, masks)?;
        let v = seg.value()?;
        Ok((
            seg,
            LossBreakdown {
                seg: v,
                total: v,
                ..Default::default()
            },
        ))
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.model.trainable_vars()
    }

    fn component_weights(&self) -> ComponentWeights {
        ComponentWeights::supervised()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    Contrastive,
    FeatureMse,
}

fn default_student() -> ModelConfig {
    ModelConfig::student_s1()
}
fn default_scales() -> Vec<Scale> {
    vec![Scale::Bottleneck]
}
fn default_loss() -> DistillLoss {
    DistillLoss::Contrastive
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::rmsprop()
}
fn default_epochs() -> usize {
    TrainOptions::student().epochs
}
fn default_batch() -> usize {
    TrainOptions::student().batch_size
}
fn default_fraction() -> f64 {
    TrainOptions::student().data_fraction
}
fn default_embed() -> usize {
    DEFAULT_EMBED_DIM
}

/// One distillation run: which taps to align, how, and how to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationPlan {
    pub name: String,
    /// Filled by the experiment runner when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<PathBuf>,
    #[serde(default = "default_student")]
    pub student: ModelConfig,
    #[serde(default = "default_scales")]
    pub scales: Vec<Scale>,
    #[serde(default = "default_loss")]
    pub distill_loss: DistillLoss,
    #[serde(default)]
    pub pmd: bool,
    /// `pmd_enabled` inside is overridden by `pmd`.
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
}

impl DistillationPlan {
    pub fn new(name: &str, scales: Vec<Scale>, pmd: bool) -> Self {
        Self {
            name: name.to_string(),
            teacher_ckpt: None,
            student: default_student(),
            scales,
            distill_loss: default_loss(),
            pmd,
            weights: LossWeights::default(),
            optimizer: default_optimizer(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            data_fraction: default_fraction(),
            embed_dim: default_embed(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            pmd_enabled: self.pmd,
            ..self.weights
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            data_fraction: self.data_fraction,
        }
    }

    /// Short label such as `B+E+PMD` or `MSE:B`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = Scale::ALL
            .iter()
            .filter(|s| self.scales.contains(s))
            .map(|s| s.letter().to_string())
            .collect();
        if self.pmd {
            parts.push("PMD".into());
        }
        let body = if parts.is_empty() { "none".to_string() } else { parts.join("+") };
        match self.distill_loss {
            DistillLoss::Contrastive => body,
            DistillLoss::FeatureMse => format!("MSE:{body}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidArgument("plan name must not be empty".into()));
        }
        if self.scales.is_empty() && !self.pmd {
            return Err(Error::InvalidArgument(format!(
                "plan `{}` distills nothing: give at least one scale or enable pmd",
                self.name
            )));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if self.scales[..i].contains(s) {
                return Err(Error::InvalidArgument(format!("plan `{}` lists {s} twice", self.name)));
            }
        }
        if self.student.role.is_teacher() {
            return Err(Error::InvalidArgument(format!("plan `{}`: student must be a student role", self.name)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be >= 1".into()));
        }
        self.student.validate()?;
        self.weights().validate()?;
        self.train_options().validate()
    }
}

fn aux_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt
}

fn scale_salt(scale: Scale) -> u64 {
    match scale {
        Scale::Encoder => 0xE1,
        Scale::Bottleneck => 0xB2,
        Scale::Decoder => 0xD3,
    }
}

enum Aligner {
    Projectors(ProjectorPair),
    Adapter(FeatureAdapter),
}

/// Student dice loss plus the plan's feature terms and optional PMD, against
/// a frozen teacher.
pub struct DistillObjective {
    pub teacher: FrozenModel,
    pub student: UNet,
    scales: Vec<Scale>,
    aligners: Vec<Aligner>,
    loss_kind: DistillLoss,
    weights: LossWeights,
}

impl DistillObjective {
    pub fn new(plan: &DistillationPlan, teacher: FrozenModel, student: UNet) -> Result<Self> {
        plan.validate()?;
        if !teacher.config().role.is_teacher() {
            return Err(Error::InvalidArgument(format!(
                "distillation needs a teacher checkpoint, got role {}",
                teacher.config().role
            )));
        }
        if student.config().role != plan.student.role {
            return Err(Error::InvalidArgument("student network does not match the plan".into()));
        }
        let mut scales: Vec<Scale> = Scale::ALL.iter().copied().filter(|s| plan.scales.contains(s)).collect();
        scales.dedup();
        let (dtype, device) = (DType::F32, Device::Cpu);
        let mut aligners = Vec::new();
        for &scale in &scales {
            let salt = scale_salt(scale);
            aligners.push(match plan.distill_loss {
                DistillLoss::Contrastive => {
                    let (sc, tc) = (student.tap_channels(scale), teacher.tap_channels(scale));
                    let sp = Projector::new(scale, sc, plan.embed_dim, aux_seed(plan.seed, salt), dtype, &device)?;
                    let tp = if sc == tc {
                        None
                    } else {
                        Some(Projector::new(scale, tc, plan.embed_dim, aux_seed(plan.seed, salt << 8), dtype, &device)?)
                    };
                    Aligner::Projectors(ProjectorPair {
                        student: sp,
                        teacher: tp,
                    })
                }
                DistillLoss::FeatureMse => {
                    Aligner::Adapter(FeatureAdapter::between(&student, &teacher, scale, aux_seed(plan.seed, salt))?)
                }
            });
        }
        Ok(Self {
            teacher,
            student,
            scales,
            aligners,
            loss_kind: plan.distill_loss,
            weights: plan.weights(),
        })
    }

    /// Named parameter stores of the projectors or adapters.
    pub fn aux_stores(&self) -> Vec<(String, &ParamStore)> {
        let mut out = Vec::new();
        for (scale, a) in self.scales.iter().zip(&self.aligners) {
            match a {
                Aligner::Projectors(p) => {
                    out.push((format!("proj_student_{scale}"), p.student.params()));
                    if let Some(t) = &p.teacher {
                        out.push((format!("proj_teacher_{scale}"), t.params()));
                    }
                }
                Aligner::Adapter(ad) => out.push((format!("adapter_{scale}"), ad.params())),
            }
        }
        out
    }

    fn aux_vars(&self) -> Vec<Var> {
        self.aux_stores()
            .into_iter()
            .flat_map(|(_, s)| s.trainable_vars())
            .collect()
    }
}

impl Objective for DistillObjective {
    fn loss(&self, images: &Tensor, masks: &Tensor, mode: Mode) -> Result<(Tensor, LossBreakdown)> {
        let s = self.student.forward_with_taps(images, mode)?;
        let t = self.teacher.forward_with_taps(images, Mode::Eval)?;
        let mut terms = LossTerms::<Tensor> {
            seg: Some(dice_loss(&candle_nn::ops::sigmoid(&s.seg_logits)?, masks)?),
            ..Default::default()
        };
        for (&scale, aligner) in self.scales.iter().zip(&self.aligners) {
            let term = match (self.loss_kind, aligner) {
                (DistillLoss::Contrastive, Aligner::Projectors(p)) => {
                    scale_contrastive_loss(&t.taps, &s.taps, p, scale, self.weights.contrastive_temperature)?
                }
                (_, Aligner::Adapter(ad)) => feature_mse_loss(t.taps.get(scale), s.taps.get(scale), Some(ad))?,
                _ => unreachable!("aligners are built from the loss kind"),
            };
            terms.set_scale(scale, term);
        }
        if self.weights.pmd_enabled {
            terms.pmd = Some(pmd_loss(&s.seg_logits, &t.seg_logits, self.weights.pmd_temperature)?);
        }
        student_total_loss(&terms, &self.weights, &self.scales)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = self.student.trainable_vars();
        vars.extend(self.aux_vars());
        vars
    }

    fn component_weights(&self) -> ComponentWeights {
        let mut w = ComponentWeights::student(&self.weights);
        for s in Scale::ALL {
            if !self.scales.contains(&s) {
                match s {
                    Scale::Encoder => w.enc = 0.0,
                    Scale::Bottleneck => w.bn = 0.0,
                    Scale::Decoder => w.dec = 0.0,
                }
            }
        }
        w
    }
}

/// An objective paired with its optimizer.
pub struct Trainer<O: Objective> {
    objective: O,
    optimizer: Optimizer,
    steps: u64,
}

impl<O: Objective> Trainer<O> {
    pub fn new(objective: O, optimizer: &OptimizerConfig) -> Result<Self> {
        let optimizer = optimizer.build(objective.trainable_vars())?;
        Ok(Self {
            objective,
            optimizer,
            steps: 0,
        })
    }

    /// One forward/backward/update on a batch in training mode.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor) -> Result<LossBreakdown> {
        let (loss, breakdown) = self.objective.loss(images, masks, Mode::Train)?;
        if !breakdown.total.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite loss at step {}: {breakdown:?}",
                self.steps
            )));
        }
        self.optimizer.backward_step(&loss)?;
        self.steps += 1;
        Ok(breakdown)
    }

    /// Mean breakdown over a dataset in evaluation mode, without updates.
    pub fn evaluate(&self, data: &Dataset, batch_size: usize) -> Result<Option<LossBreakdown>> {
        if data.is_empty() {
            return Ok(None);
        }
        let mut parts = Vec::new();
        let mut weights = Vec::new();
        for idx in sequential_batches(data.len(), batch_size) {
            let (x, m) = labeled_batch(data, &idx)?;
            parts.push(self.objective.loss(&x, &m, Mode::Eval)?.1);
            weights.push(idx.len());
        }
        Ok(Some(weighted_mean(&parts, &weights)))
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn into_objective(self) -> O {
        self.objective
    }

    /// Runs `opts.epochs` epochs over `train` with a seeded shuffle per
    /// epoch, recording train and validation means after each.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset, opts: &TrainOptions, label: &str) -> Result<TrainingRecord> {
        opts.validate()?;
        require_labeled(train, "training")?;
        if !val.is_empty() {
            require_labeled(val, "validation")?;
        }
        let mut rows = Vec::with_capacity(opts.epochs);
        for epoch in 0..opts.epochs {
            let started = Instant::now();
            let mut parts = Vec::new();
            let mut sizes = Vec::new();
            for idx in epoch_batches(train.len(), opts.batch_size, opts.seed, epoch) {
                let (x, m) = labeled_batch(train, &idx)?;
                parts.push(self.step(&x, &m)?);
                sizes.push(idx.len());
            }
            let train_mean = weighted_mean(&parts, &sizes);
            let val_mean = self.evaluate(val, opts.batch_size)?;
            log::info!(
                "{label} epoch {}/{}: train {:.5} val {}",
                epoch + 1,
                opts.epochs,
                train_mean.total,
                val_mean.map(|v| format!("{:.5}", v.total)).unwrap_or_else(|| "-".into())
            );
            rows.push(EpochRecord {
                epoch: epoch + 1,
                train: train_mean,
                val: val_mean,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        Ok(TrainingRecord {
            label: label.to_string(),
            seed: opts.seed,
            data_fraction: opts.data_fraction,
            n_train: train.len(),
            n_val: val.len(),
            weights: self.objective.component_weights(),
            rows,
        })
    }
}

fn weighted_mean(parts: &[LossBreakdown], sizes: &[usize]) -> LossBreakdown {
    let n: usize = sizes.iter().sum();
    let scaled: Vec<LossBreakdown> = parts
        .iter()
        .zip(sizes)
        .map(|(p, &s)| scale_breakdown(p, s as f64 * parts.len() as f64 / n.max(1) as f64))
        .collect();
    LossBreakdown::mean(&scaled)
}

fn scale_breakdown(b: &LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        seg: b.seg * k,
        recon: b.recon.map(|v| v * k),
        con_enc: b.con_enc.map(|v| v * k),
        con_bn: b.con_bn.map(|v| v * k),
        con_dec: b.con_dec.map(|v| v * k),
        pmd: b.pmd.map(|v| v * k),
        total: b.total * k,
    }
}

fn require_labeled(data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{what} set has no samples")));
    }
    if !data.is_labeled() {
        return Err(Error::InvalidArgument(format!("{what} set must have masks for every slice")));
    }
    Ok(())
}

fn labeled_batch(data: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let (x, m) = data.batch(idx, &Device::Cpu)?;
    let m = m.ok_or_else(|| Error::InvalidArgument("batch has unlabeled slices".into()))?;
    Ok((x, m))
}

/// A trained network with its curves and any training-time helper arrays.
pub struct TrainOutcome {
    pub model: UNet,
    pub record: TrainingRecord,
    pub steps: u64,
    pub seed: u64,
    pub aux: Vec<(String, ParamStore)>,
    pub extra: Vec<(String, serde_json::Value)>,
}

impl TrainOutcome {
    pub fn meta(&self) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(self.model.config().clone(), self.steps, self.seed)
            .with_extra("label", self.record.label.clone().into())
            .with_extra("data_fraction", self.record.data_fraction.into());
        for (k, v) in &self.extra {
            meta = meta.with_extra(k, v.clone());
        }
        meta
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let aux: Vec<(&str, &ParamStore)> = self.aux.iter().map(|(n, s)| (n.as_str(), s)).collect();
        save_checkpoint(path, &self.model, &self.meta(), &aux)
    }
}

fn training_subset(train: &Dataset, opts: &TrainOptions) -> Result<Dataset> {
    opts.validate()?;
    require_labeled(train, "training")?;
    train.subset_fraction(opts.data_fraction, opts.seed)
}

/// Trains a multi-task teacher on `dice_bce + λ_rec · MSE`.
pub fn train_teacher(
    train: &Dataset,
    val: &Dataset,
    cfg: &ModelConfig,
    opts: &TrainOptions,
    lambda_rec: f64,
) -> Result<TrainOutcome> {
    if cfg.role != Role::TeacherMtUnet {
        return Err(Error::InvalidArgument(format!("train_teacher needs the teacher role, got {}", cfg.role)));
    }
    let subset = training_subset(train, opts)?;
    let model = UNet::new(cfg, opts.seed, DType::F32, &Device::Cpu)?;
    let mut trainer = Trainer::new(TeacherObjective::new(model, lambda_rec)?, &opts.optimizer)?;
    let record = trainer.fit(&subset, val, opts, "teacher")?;
    let steps = trainer.steps();
    Ok(TrainOutcome {
        model: trainer.into_objective().model,
        record,
        steps,
        seed: opts.seed,
        aux: Vec::new(),
        extra: vec![("lambda_rec".into(), lambda_rec.into())],
    })
}

/// Supervised student training on the Dice loss alone.
pub fn train_student_baseline(
    train: &Dataset,
    val: &Dataset,
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if cfg.role.is_teacher() {
        return Err(Error::InvalidArgument("train_student_baseline needs a student role".into()));
    }
    let subset = training_subset(train, opts)?;
    let model = UNet::new(cfg, opts.seed, DType::F32, &Device::Cpu)?;
    let mut trainer = Trainer::new(DiceObjective::new(model), &opts.optimizer)?;
    let record = trainer.fit(&subset, val, opts, "baseline")?;
    let steps = trainer.steps();
    Ok(TrainOutcome {
        model: trainer.into_objective().model,
        record,
        steps,
        seed: opts.seed,
        aux: Vec::new(),
        extra: Vec::new(),
    })
}

/// Loads the plan's teacher checkpoint, freezes it and distills.
pub fn distill(plan: &DistillationPlan, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    let path = plan
        .teacher_ckpt
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("plan `{}` has no teacher checkpoint", plan.name)))?;
    let (teacher, _) = load_checkpoint(path)?;
    distill_with_teacher(plan, teacher.freeze(), train, val)
}

/// Distills a frozen teacher into a freshly initialized student. The student
/// is seeded exactly like a baseline run with the same seed.
pub fn distill_with_teacher(
    plan: &DistillationPlan,
    teacher: FrozenModel,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    plan.validate()?;
    let opts = plan.train_options();
    let subset = training_subset(train, &opts)?;
    let student = UNet::new(&plan.student, plan.seed, DType::F32, &Device::Cpu)?;
    let objective = DistillObjective::new(plan, teacher, student)?;
    let before = objective.teacher.checksum()?;
    let mut trainer = Trainer::new(objective, &opts.optimizer)?;
    let record = trainer.fit(&subset, val, &opts, &plan.name)?;
    let steps = trainer.steps();
    let objective = trainer.into_objective();
    if objective.teacher.checksum()? != before {
        return Err(Error::InvalidArgument("teacher parameters changed during distillation".into()));
    }
    let aux = objective
        .aux_stores()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect();
    let plan_json = serde_json::to_value(plan).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(TrainOutcome {
        model: objective.student,
        record,
        steps,
        seed: plan.seed,
        aux,
        extra: vec![("plan".into(), plan_json)],
    })
}
