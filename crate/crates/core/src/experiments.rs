//! Experiment configs, the ablation runner, result tables and reports.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/<name>/teacher/{ckpt.safetensors, record.csv, metrics.json}
//! <output_dir>/<name>/<method>/<seed>/{ckpt.safetensors, record.csv, metrics.json, curves.png}
//! <output_dir>/<name>/{result_table.csv, runs.csv, report.md}
//! ```
//!
//! Each `<method>/<seed>` directory is built under a temporary name and
//! renamed into place once complete, so its presence marks a finished run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, write_atomic};
use crate::data::{build_dataset, make_synthetic_dataset, probe_image_size, Dataset, DatasetSpec, Split};
use crate::distillation::{
    distill_with_teacher, holdout_split, train_student_baseline, train_teacher, DistillationPlan, EpochRecord,
    TrainOptions, TrainOutcome, TrainingRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, one_way_anova, AggregateMetrics, AnovaResult, DEFAULT_THRESHOLD};
use crate::models::{count_parameters, FrozenModel, ModelConfig, Role, TapNetwork, UNet};
use crate::optim::OptimizerConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "ckpt.safetensors";
pub const RECORD_FILE: &str = "record.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.png";
pub const RESULT_TABLE_FILE: &str = "result_table.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const REPORT_FILE: &str = "report.md";
pub const TEACHER_DIR: &str = "teacher";
/// Seed of the validation split, shared by every run so that all methods are
/// scored on the same held-out subjects.
pub const SPLIT_SEED: u64 = 0;

/// Where slices come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        image_size: (usize, usize),
        #[serde(default)]
        seed: u64,
    },
    Directory {
        path: PathBuf,
        #[serde(default = "train_split")]
        split: Split,
        /// Native size of the first image when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_size: Option<(usize, usize)>,
    },
}

fn train_split() -> Split {
    Split::Train
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { n, image_size, seed } => make_synthetic_dataset(*n, *image_size, *seed),
            DataSource::Directory {
                path,
                split,
                image_size,
            } => {
                let image_size = match image_size {
                    Some(s) => *s,
                    None => probe_image_size(path, *split)?,
                };
                build_dataset(&DatasetSpec {
                    source_dir: path.clone(),
                    split: *split,
                    fraction: 1.0,
                    seed: 0,
                    image_size,
                    labeled: true,
                })
            }
        }
    }
}

fn default_teacher_model() -> ModelConfig {
    ModelConfig::teacher()
}
fn default_teacher_epochs() -> usize {
    TrainOptions::teacher().epochs
}
fn default_batch() -> usize {
    8
}
fn default_adamw() -> OptimizerConfig {
    OptimizerConfig::adamw()
}
fn default_lambda() -> f64 {
    1.0
}

/// Either an existing teacher checkpoint or how to train one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    #[serde(default = "default_teacher_model")]
    pub model: ModelConfig,
    #[serde(default = "default_teacher_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adamw")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_lambda")]
    pub lambda_rec: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            ckpt: None,
            model: default_teacher_model(),
            epochs: default_teacher_epochs(),
            batch_size: default_batch(),
            optimizer: default_adamw(),
            lambda_rec: default_lambda(),
            seed: 0,
        }
    }
}

impl TeacherSpec {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            data_fraction: 1.0,
        }
    }
}

fn default_baseline_name() -> String {
    "baseline".into()
}
fn default_student_model() -> ModelConfig {
    ModelConfig::student_s1()
}
fn default_rmsprop() -> OptimizerConfig {
    OptimizerConfig::rmsprop()
}
fn default_student_epochs() -> usize {
    TrainOptions::student().epochs
}
fn default_student_fraction() -> f64 {
    TrainOptions::student().data_fraction
}

/// A supervised (no teacher) student run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_baseline_name")]
    pub name: String,
    #[serde(default = "default_student_model")]
    pub student: ModelConfig,
    #[serde(default = "default_rmsprop")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_student_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_student_fraction")]
    pub data_fraction: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            name: default_baseline_name(),
            student: default_student_model(),
            optimizer: default_rmsprop(),
            epochs: default_student_epochs(),
            batch_size: default_batch(),
            data_fraction: default_student_fraction(),
        }
    }
}

impl BaselineSpec {
    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            data_fraction: self.data_fraction,
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_baselines() -> Vec<BaselineSpec> {
    vec![BaselineSpec::default()]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_true() -> bool {
    true
}

/// Top-level experiment description (schema version 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DataSource,
    /// Scored instead of the validation split when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DataSource>,
    #[serde(default)]
    pub teacher: TeacherSpec,
    /// The first entry is the reference for every delta column.
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default)]
    pub plans: Vec<DistillationPlan>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub plots: bool,
}

fn config_err(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

fn check_name(name: &str, pointer: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.'));
    if ok {
        Ok(())
    } else {
        Err(config_err(
            pointer,
            format!("`{name}` must be non-empty and use only letters, digits, `_`, `-`, `+` or `.`"),
        ))
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "/{index}");
            }
            Segment::Map { key } => {
                let _ = write!(out, "/{}", key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                let _ = write!(out, "/{variant}");
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config; errors carry a JSON pointer.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            config_err(&pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config values serialize") + "\n"
    }

    /// A small synthetic experiment with every default spelled out.
    pub fn example() -> Self {
        let mut plans = Vec::new();
        for (name, scales, pmd) in [
            ("B", vec![crate::models::Scale::Bottleneck], false),
            ("B+PMD", vec![crate::models::Scale::Bottleneck], true),
            ("E+B+D", crate::models::Scale::ALL.to_vec(), false),
        ] {
            plans.push(DistillationPlan::new(name, scales, pmd));
        }
        Self {
            version: CONFIG_VERSION,
            name: "example".into(),
            output_dir: default_output_dir(),
            dataset: DataSource::Synthetic {
                n: 200,
                image_size: (64, 64),
                seed: 0,
            },
            eval_dataset: None,
            teacher: TeacherSpec::default(),
            baselines: default_baselines(),
            plans,
            seeds: default_seeds(),
            threshold: default_threshold(),
            plots: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(
                "/version",
                format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        check_name(&self.name, "/name")?;
        if self.seeds.is_empty() {
            return Err(config_err("/seeds", "at least one seed is required"));
        }
        if self.baselines.is_empty() {
            return Err(config_err("/baselines", "at least one baseline is required"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(config_err("/threshold", "threshold must lie in (0, 1)"));
        }
        if !self.teacher.model.role.is_teacher() {
            return Err(config_err("/teacher/model/role", "teacher model must use the teacher role"));
        }
        self.teacher
            .model
            .validate()
            .and_then(|_| self.teacher.train_options().validate())
            .map_err(|e| config_err("/teacher", e.to_string()))?;
        let mut names: Vec<&str> = vec![TEACHER_DIR];
        for (i, b) in self.baselines.iter().enumerate() {
            let p = format!("/baselines/{i}");
            check_name(&b.name, &format!("{p}/name"))?;
            if names.contains(&b.name.as_str()) {
                return Err(config_err(&format!("{p}/name"), format!("duplicate method name `{}`", b.name)));
            }
            names.push(&b.name);
            if b.student.role.is_teacher() {
                return Err(config_err(&format!("{p}/student/role"), "baseline must be a student role"));
            }
            b.student
                .validate()
                .and_then(|_| b.train_options(0).validate())
                .map_err(|e| config_err(&p, e.to_string()))?;
        }
        for (i, plan) in self.plans.iter().enumerate() {
            let p = format!("/plans/{i}");
            check_name(&plan.name, &format!("{p}/name"))?;
            if names.contains(&plan.name.as_str()) {
                return Err(config_err(&format!("{p}/name"), format!("duplicate method name `{}`", plan.name)));
            }
            names.push(&plan.name);
            plan.validate().map_err(|e| config_err(&p, e.to_string()))?;
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn plan(&self, name: &str) -> Result<&DistillationPlan> {
        self.plans
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| config_err("/plans", format!("no plan named `{name}`")))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

/// Writes the record CSV and, when `plot` is set, a PNG of train and
/// validation totals per epoch. Returns the written paths.
pub fn emit_training_curves(record: &TrainingRecord, out_dir: &Path, plot: bool) -> Result<Vec<PathBuf>> {
    if record.rows.is_empty() {
        return Err(Error::InvalidArgument("training record has no rows".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join(RECORD_FILE);
    fs::write(&csv, record.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let mut written = vec![csv];
    if plot {
        let png = out_dir.join(CURVES_FILE);
        plot_curves(&record.rows, &png)?;
        written.push(png);
    }
    Ok(written)
}

/// Line plot of the train (blue) and validation (red) totals against epoch.
pub fn plot_curves(rows: &[EpochRecord], path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));
    let train: Vec<(f64, f64)> = rows.iter().map(|r| (r.epoch as f64, r.train.total)).collect();
    let val: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.val.map(|v| (r.epoch as f64, v.total)))
        .collect();
    let finite = train.iter().chain(&val).map(|p| p.1).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let x_max = rows.last().map(|r| r.epoch).unwrap_or(1).max(2) as f64;

    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(1.0..x_max, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .plotting_area()
        .draw(&Rectangle::new(
            [(1.0, lo - pad), (x_max, hi + pad)],
            ShapeStyle::from(&BLACK).stroke_width(1),
        ))
        .map_err(|e| plot_err(&e))?;
    chart
        .draw_series(LineSeries::new(train, ShapeStyle::from(&BLUE).stroke_width(2)))
        .map_err(|e| plot_err(&e))?;
    if !val.is_empty() {
        chart
            .draw_series(LineSeries::new(val, ShapeStyle::from(&RED).stroke_width(2)))
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// What `metrics.json` holds for one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub label: String,
    pub seed: u64,
    pub params: usize,
    pub data_fraction: f64,
    pub metrics: AggregateMetrics,
}

/// One (method, seed) cell of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

/// Data shared by every run of an experiment.
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub eval: Dataset,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let all = cfg.dataset.load()?;
        let (train, val) = holdout_split(&all, SPLIT_SEED)?;
        let eval = match &cfg.eval_dataset {
            Some(src) => src.load()?,
            None if !val.is_empty() => val.clone(),
            None => train.clone(),
        };
        Ok(Self { train, val, eval })
    }
}

fn method_label(cfg: &ExperimentConfig, method: &str) -> String {
    if let Some(b) = cfg.baselines.iter().find(|b| b.name == method) {
        return format!("{} ({})", b.name, b.student.role);
    }
    cfg.plans
        .iter()
        .find(|p| p.name == method)
        .map(|p| format!("KD({}) {}", p.student.role, p.label()))
        .unwrap_or_else(|| method.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_run_metrics(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Persists a finished training run and scores it on `eval`.
fn finish_run(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    method: &str,
    seed: u64,
    eval: &Dataset,
    dir: &Path,
) -> Result<RunMetrics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    emit_training_curves(&outcome.record, dir, cfg.plots)?;
    let report = evaluate_model(&outcome.model, eval, cfg.threshold)?;
    let metrics = RunMetrics {
        method: method.to_string(),
        label: method_label(cfg, method),
        seed,
        params: count_parameters(&outcome.model),
        data_fraction: outcome.record.data_fraction,
        metrics: report.aggregate,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

/// Runs `work` into `<run_dir>/<method>/<seed>` unless that directory already
/// holds a finished run.
fn run_cell(
    run_dir: &Path,
    method: &str,
    seed: u64,
    work: impl FnOnce(&Path) -> Result<RunMetrics>,
) -> Result<RunMetrics> {
    let parent = run_dir.join(method);
    let done = parent.join(seed.to_string());
    if done.join(CHECKPOINT_FILE).is_file() && done.join(METRICS_FILE).is_file() {
        log::info!("{method}/{seed}: already complete, skipping");
        return read_run_metrics(&done);
    }
    let partial = parent.join(format!(".{seed}.partial"));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    let metrics = work(&partial)?;
    if done.exists() {
        fs::remove_dir_all(&done).map_err(|e| Error::io(&done, e))?;
    }
    fs::rename(&partial, &done).map_err(|e| Error::io(&done, e))?;
    Ok(metrics)
}

/// Loads the configured teacher checkpoint, or the one under the run
/// directory, or trains and saves one there.
pub fn ensure_teacher(cfg: &ExperimentConfig, data: &ExperimentData, retrain: bool) -> Result<(PathBuf, UNet)> {
    if let Some(path) = &cfg.teacher.ckpt {
        let (model, _) = load_checkpoint(path)?;
        return Ok((path.clone(), model));
    }
    let dir = cfg.run_dir().join(TEACHER_DIR);
    let path = dir.join(CHECKPOINT_FILE);
    if path.is_file() && !retrain {
        let (model, _) = load_checkpoint(&path)?;
        return Ok((path, model));
    }
    let outcome = train_teacher(
        &data.train,
        &data.val,
        &cfg.teacher.model,
        &cfg.teacher.train_options(),
        cfg.teacher.lambda_rec,
    )?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    emit_training_curves(&outcome.record, &dir, cfg.plots)?;
    let report = evaluate_model(&outcome.model, &data.eval, cfg.threshold)?;
    let metrics = RunMetrics {
        method: TEACHER_DIR.into(),
        label: format!("{}", cfg.teacher.model.role),
        seed: cfg.teacher.seed,
        params: count_parameters(&outcome.model),
        data_fraction: 1.0,
        metrics: report.aggregate,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    outcome.save_checkpoint(&path)?;
    Ok((path, outcome.model))
}

fn run_baseline(cfg: &ExperimentConfig, data: &ExperimentData, spec: &BaselineSpec, seed: u64) -> RunResult {
    let outcome = run_cell(&cfg.run_dir(), &spec.name, seed, |dir| {
        let out = train_student_baseline(&data.train, &data.val, &spec.student, &spec.train_options(seed))?;
        finish_run(cfg, &out, &spec.name, seed, &data.eval, dir)
    });
    RunResult {
        method: spec.name.clone(),
        seed,
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

fn run_plan(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    plan: &DistillationPlan,
    teacher: &(PathBuf, UNet),
    seed: u64,
) -> RunResult {
    let outcome = run_cell(&cfg.run_dir(), &plan.name, seed, |dir| {
        let mut plan = plan.clone();
        plan.seed = seed;
        if plan.teacher_ckpt.is_none() {
            plan.teacher_ckpt = Some(teacher.0.clone());
        }
        let frozen: FrozenModel = teacher.1.clone().freeze();
        let out = distill_with_teacher(&plan, frozen, &data.train, &data.val)?;
        finish_run(cfg, &out, &plan.name, seed, &data.eval, dir)
    });
    RunResult {
        method: plan.name.clone(),
        seed,
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Trains the configured supervised students for every seed.
pub fn run_baselines(cfg: &ExperimentConfig, data: &ExperimentData, specs: &[BaselineSpec]) -> Vec<RunResult> {
    let mut out = Vec::new();
    for spec in specs {
        for &seed in &cfg.seeds {
            out.push(run_baseline(cfg, data, spec, seed));
        }
    }
    out
}

/// Runs the named plans for every seed against the experiment's teacher.
pub fn run_plans(cfg: &ExperimentConfig, data: &ExperimentData, names: &[&str]) -> Result<Vec<RunResult>> {
    let plans = names.iter().map(|n| cfg.plan(n)).collect::<Result<Vec<_>>>()?;
    let teacher = ensure_teacher(cfg, data, false)?;
    if teacher.1.config().role != Role::TeacherMtUnet {
        return Err(Error::InvalidArgument("teacher checkpoint does not hold a teacher network".into()));
    }
    let mut out = Vec::new();
    for plan in plans {
        for &seed in &cfg.seeds {
            out.push(run_plan(cfg, data, plan, &teacher, seed));
        }
    }
    Ok(out)
}

/// Every baseline and plan for every seed, then the seed-averaged table,
/// written to the run directory. Failed cells become FAILED rows.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    let mut runs = run_baselines(cfg, &data, &cfg.baselines);
    let names: Vec<&str> = cfg.plans.iter().map(|p| p.name.as_str()).collect();
    if !names.is_empty() {
        match run_plans(cfg, &data, &names) {
            Ok(r) => runs.extend(r),
            Err(e) => {
                let msg = format!("teacher unavailable: {e}");
                for n in &names {
                    for &seed in &cfg.seeds {
                        runs.push(RunResult {
                            method: n.to_string(),
                            seed,
                            outcome: Err(msg.clone()),
                        });
                    }
                }
            }
        }
    }
    let methods: Vec<(String, String)> = cfg
        .baselines
        .iter()
        .map(|b| b.name.clone())
        .chain(names.iter().map(|s| s.to_string()))
        .map(|m| (m.clone(), method_label(cfg, &m)))
        .collect();
    let table = ResultTable::from_runs(&methods, &runs);
    let dir = cfg.run_dir();
    write_atomic(&dir.join(RESULT_TABLE_FILE), table.to_csv().as_bytes())?;
    write_atomic(&dir.join(RUNS_FILE), runs_to_csv(&runs).as_bytes())?;
    Ok(table)
}

fn clean_cell(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

pub const RUNS_HEADER: &str = "method,seed,iou,dice,recall,precision,status,error";

pub fn runs_to_csv(runs: &[RunResult]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for r in runs {
        match &r.outcome {
            Ok(m) => {
                let a = &m.metrics;
                let _ = writeln!(out, "{},{},{},{},{},{},OK,", r.method, r.seed, a.iou, a.dice, a.recall, a.precision);
            }
            Err(e) => {
                let _ = writeln!(out, "{},{},,,,,FAILED,{}", r.method, r.seed, clean_cell(e));
            }
        }
    }
    out
}

/// `(method, seed, iou)` for every successful row of a runs CSV.
pub fn parse_runs_csv(text: &str) -> Result<Vec<(String, u64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.splitn(8, ',').collect();
        if cells.len() < 7 {
            return Err(Error::InvalidArgument(format!("runs line {}: too few cells", i + 1)));
        }
        if cells[6] != "OK" {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("runs line {}: bad number", i + 1));
        out.push((
            cells[0].to_string(),
            cells[1].parse().map_err(|_| bad())?,
            cells[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    Failed,
}

/// Seed-averaged scores of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub label: String,
    pub iou: f64,
    pub dice: f64,
    pub recall: f64,
    pub precision: f64,
    pub params_m: f64,
    pub n_seeds: usize,
    pub status: RowStatus,
}

/// `100 · (value − baseline) / baseline`.
pub fn delta_pct(value: f64, baseline: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

pub const RESULT_TABLE_HEADER: &str = "method,label,iou,dice,recall,precision,params_M,\
iou_delta_pct,dice_delta_pct,recall_delta_pct,precision_delta_pct,n_seeds,status";

/// Methods against a reference row (the first row).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Averages successful seeds per method, in the order of `methods`
    /// (`(name, label)` pairs). A method with any failed seed is FAILED.
    pub fn from_runs(methods: &[(String, String)], runs: &[RunResult]) -> Self {
        let rows = methods
            .iter()
            .map(|(method, label)| {
                let cells: Vec<&RunResult> = runs.iter().filter(|r| &r.method == method).collect();
                let ok: Vec<&RunMetrics> = cells.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
                let failed = cells.is_empty() || ok.len() != cells.len();
                let n = ok.len().max(1) as f64;
                let mean = |f: fn(&RunMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
                ResultRow {
                    method: method.clone(),
                    label: label.clone(),
                    iou: mean(|m| m.metrics.iou),
                    dice: mean(|m| m.metrics.dice),
                    recall: mean(|m| m.metrics.recall),
                    precision: mean(|m| m.metrics.precision),
                    params_m: ok.first().map(|m| m.params as f64 / 1e6).unwrap_or(0.0),
                    n_seeds: ok.len(),
                    status: if failed { RowStatus::Failed } else { RowStatus::Ok },
                }
            })
            .collect();
        Self { rows }
    }

    pub fn baseline(&self) -> Option<&ResultRow> {
        self.rows.first()
    }

    /// Deltas of `row` against the reference, `None` when either failed.
    pub fn deltas(&self, row: &ResultRow) -> Option<[f64; 4]> {
        let b = self.baseline()?;
        if b.status == RowStatus::Failed || row.status == RowStatus::Failed {
            return None;
        }
        Some([
            delta_pct(row.iou, b.iou),
            delta_pct(row.dice, b.dice),
            delta_pct(row.recall, b.recall),
            delta_pct(row.precision, b.precision),
        ])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULT_TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            match (r.status, self.deltas(r)) {
                (RowStatus::Ok, Some(d)) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{},{},OK",
                        r.method,
                        clean_cell(&r.label),
                        r.iou,
                        r.dice,
                        r.recall,
                        r.precision,
                        r.params_m,
                        d[0],
                        d[1],
                        d[2],
                        d[3],
                        r.n_seeds
                    );
                }
                (RowStatus::Ok, None) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},,,,,{},OK",
                        r.method,
                        clean_cell(&r.label),
                        r.iou,
                        r.dice,
                        r.recall,
                        r.precision,
                        r.params_m,
                        r.n_seeds
                    );
                }
                (RowStatus::Failed, _) => {
                    let _ = writeln!(out, "{},{},,,,,,,,,,{},FAILED", r.method, clean_cell(&r.label), r.n_seeds);
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RESULT_TABLE_HEADER) {
            return Err(Error::InvalidArgument("not a result table CSV".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 13 {
                return Err(Error::InvalidArgument(format!("result table line {}: expected 13 cells", i + 2)));
            }
            let num = |k: usize| -> Result<f64> {
                if c[k].is_empty() {
                    Ok(f64::NAN)
                } else {
                    c[k].parse()
                        .map_err(|_| Error::InvalidArgument(format!("result table line {}: bad number", i + 2)))
                }
            };
            rows.push(ResultRow {
                method: c[0].to_string(),
                label: c[1].to_string(),
                iou: num(2)?,
                dice: num(3)?,
                recall: num(4)?,
                precision: num(5)?,
                params_m: num(6)?,
                n_seeds: c[11].parse().unwrap_or(0),
                status: if c[12] == "OK" { RowStatus::Ok } else { RowStatus::Failed },
            });
        }
        Ok(Self { rows })
    }

    /// Index of the successful row with the highest IoU (first on ties).
    pub fn best_row(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if r.status == RowStatus::Ok && best.map_or(true, |b| r.iou > self.rows[b].iou) {
                best = Some(i);
            }
        }
        best
    }

    /// Markdown table, reference row first and the best IoU row in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Params (M) | IoU | Dice | Recall | Precision |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        let best = self.best_row();
        for (i, r) in self.rows.iter().enumerate() {
            let bold = |s: String| if Some(i) == best { format!("**{s}**") } else { s };
            let name = if i == 0 { format!("{} (baseline)", r.label) } else { r.label.clone() };
            if r.status == RowStatus::Failed {
                let _ = writeln!(out, "| {name} | - | FAILED | FAILED | FAILED | FAILED |");
                continue;
            }
            let vals = [r.iou, r.dice, r.recall, r.precision];
            let cells: Vec<String> = match (i, self.deltas(r)) {
                (0, _) | (_, None) => vals.iter().map(|v| format!("{v:.3}")).collect(),
                (_, Some(d)) => vals
                    .iter()
                    .zip(d)
                    .map(|(v, d)| format!("{v:.3} ({d:+.2}%)"))
                    .collect(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} |",
                bold(name),
                bold(format!("{:.3}", r.params_m)),
                cells.into_iter().map(bold).collect::<Vec<_>>().join(" | ")
            );
        }
        out
    }
}

/// Markdown report: one section per table, the ANOVA block and links to
/// curve images (relative to the report's directory).
pub fn render_report(tables: &[(String, ResultTable)], curves: &[PathBuf], anova: Option<(&AnovaResult, &str)>) -> String {
    let mut out = String::from("# Distillation results\n\n");
    for (title, table) in tables {
        let _ = writeln!(out, "## {title}\n");
        out.push_str(&table.to_markdown());
        out.push('\n');
    }
    out.push_str("## Statistical test\n\n");
    match anova {
        Some((a, groups)) => {
            let _ = writeln!(out, "One-way ANOVA on per-seed IoU. {groups}\n");
            let _ = writeln!(
                out,
                "F = {:.3}, p = {:.3}, df = ({}, {})",
                a.f_statistic, a.p_value, a.df_between, a.df_within
            );
        }
        None => out.push_str("Not enough successful runs for an ANOVA (each group needs two or more seeds).\n"),
    }
    if !curves.is_empty() {
        out.push_str("\n## Training curves\n\nBlue: training loss. Red: validation loss.\n\n");
        for c in curves {
            let _ = writeln!(out, "![{}]({})", c.display(), c.display());
        }
    }
    out
}

/// Reads a finished ablation directory and writes `report.md` next to it.
/// The ANOVA compares the reference method's per-seed IoU with the pooled
/// per-seed IoU of every distillation method in the table.
pub fn write_report(run_dir: &Path) -> Result<PathBuf> {
    let table_path = run_dir.join(RESULT_TABLE_FILE);
    let table = ResultTable::from_csv(&fs::read_to_string(&table_path).map_err(|e| Error::io(&table_path, e))?)?;
    let runs_path = run_dir.join(RUNS_FILE);
    let runs = parse_runs_csv(&fs::read_to_string(&runs_path).map_err(|e| Error::io(&runs_path, e))?)?;
    let reference = table
        .baseline()
        .ok_or_else(|| Error::InvalidArgument("result table is empty".into()))?
        .method
        .clone();
    let distilled: Vec<String> = table
        .rows
        .iter()
        .filter(|r| r.label.starts_with("KD("))
        .map(|r| r.method.clone())
        .collect();
    let base_group: Vec<f64> = runs.iter().filter(|r| r.0 == reference).map(|r| r.2).collect();
    let kd_group: Vec<f64> = runs.iter().filter(|r| distilled.contains(&r.0)).map(|r| r.2).collect();
    let anova = if base_group.len() >= 2 && kd_group.len() >= 2 {
        Some(one_way_anova(&[base_group.clone(), kd_group.clone()])?)
    } else {
        None
    };
    let note = format!(
        "Groups: `{reference}` (n = {}) vs distilled methods {} pooled (n = {}).",
        base_group.len(),
        distilled.iter().map(|m| format!("`{m}`")).collect::<Vec<_>>().join(", "),
        kd_group.len()
    );

    let mut curves = Vec::new();
    let mut methods: Vec<String> = vec![TEACHER_DIR.to_string()];
    methods.extend(table.rows.iter().map(|r| r.method.clone()));
    for m in &methods {
        let dir = run_dir.join(m);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut seeds: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        seeds.sort();
        let candidates: Vec<PathBuf> = if m == TEACHER_DIR { vec![dir.clone()] } else { seeds };
        for d in candidates.into_iter().filter(|d| d.join(RECORD_FILE).is_file()) {
            let png = d.join(CURVES_FILE);
            if !png.is_file() {
                let text = fs::read_to_string(d.join(RECORD_FILE)).map_err(|e| Error::io(&d, e))?;
                let rows = TrainingRecord::rows_from_csv(&text)?;
                if rows.is_empty() {
                    continue;
                }
                plot_curves(&rows, &png)?;
            }
            curves.push(png.strip_prefix(run_dir).unwrap_or(&png).to_path_buf());
        }
    }
    let md = render_report(
        &[("Result table".to_string(), table)],
        &curves,
        anova.as_ref().map(|a| (a, note.as_str())),
    );
    let path = run_dir.join(REPORT_FILE);
    write_atomic(&path, md.as_bytes())?;
    Ok(path)
}
