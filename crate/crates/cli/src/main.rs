//! `contrakd`: data preparation, training, distillation, evaluation and
//! reporting from the command line.
//!
//! Every command prints one JSON object on stdout when it succeeds. Failures
//! print one JSON line `{"error": <kind>, "message": <text>}` on stderr and
//! exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contrakd::checkpoint::load_checkpoint;
use contrakd::data::{preprocess_volumes, Split};
use contrakd::experiments::{
    ensure_teacher, parse_config, run_ablation, run_baselines, run_plans, write_report, DataSource, ExperimentConfig,
    ExperimentData, RunResult, RESULT_TABLE_FILE, RUNS_FILE,
};
use contrakd::metrics::{evaluate_model, DEFAULT_THRESHOLD};
use contrakd::models::{count_parameters, TapNetwork};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "contrakd", version, about = "Contrastive knowledge distillation for 2D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Slice NIfTI volumes into a PNG corpus.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of subjects kept.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the multi-task teacher of an experiment.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train students on labels alone.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        /// Run the configured baselines (their data fraction, every seed).
        #[arg(long)]
        baseline: bool,
    },
    /// Run one distillation plan for every seed.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        plan: String,
    },
    /// Score a checkpoint on a PNG corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run every baseline and plan for every seed and write the result table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render report.md for a finished ablation directory.
    Report {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
    },
}

struct Failure {
    kind: String,
    message: String,
}

impl From<contrakd::Error> for Failure {
    fn from(e: contrakd::Error) -> Self {
        Failure {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn fail(kind: &str, message: impl Into<String>) -> Failure {
    Failure {
        kind: kind.into(),
        message: message.into(),
    }
}

fn runs_json(runs: &[RunResult]) -> Value {
    Value::Array(
        runs.iter()
            .map(|r| match &r.outcome {
                Ok(m) => json!({"method": r.method, "seed": r.seed, "status": "OK", "metrics": m.metrics}),
                Err(e) => json!({"method": r.method, "seed": r.seed, "status": "FAILED", "error": e}),
            })
            .collect(),
    )
}

fn check_runs(runs: &[RunResult]) -> Result<Value, Failure> {
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("{}/{}: {e}", r.method, r.seed)))
        .collect();
    if failed.is_empty() {
        Ok(json!({"runs": runs_json(runs)}))
    } else {
        Err(fail("run_failed", failed.join("; ")))
    }
}

fn load(config: &Path) -> Result<(ExperimentConfig, ExperimentData), Failure> {
    let cfg = parse_config(config)?;
    let data = ExperimentData::load(&cfg)?;
    Ok((cfg, data))
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::Prep {
            input,
            out,
            fraction,
            seed,
        } => {
            let summary = preprocess_volumes(&input, &out, fraction, seed)?;
            Ok(json!({"out": out, "summary": summary}))
        }
        Command::TrainTeacher { config } => {
            let (mut cfg, data) = load(&config)?;
            cfg.teacher.ckpt = None;
            let (path, model) = ensure_teacher(&cfg, &data, true)?;
            Ok(json!({"ckpt": path, "params": count_parameters(&model)}))
        }
        Command::TrainStudent { config, baseline } => {
            let (cfg, data) = load(&config)?;
            let specs = if baseline {
                cfg.baselines.clone()
            } else {
                cfg.baselines
                    .iter()
                    .map(|b| {
                        let mut b = b.clone();
                        b.name = format!("{}_full", b.name);
                        b.data_fraction = 1.0;
                        b
                    })
                    .collect()
            };
            check_runs(&run_baselines(&cfg, &data, &specs))
        }
        Command::Distill { config, plan } => {
            let (cfg, data) = load(&config)?;
            check_runs(&run_plans(&cfg, &data, &[plan.as_str()])?)
        }
        Command::Eval { ckpt, data, threshold } => {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(fail("invalid_argument", format!("threshold must lie in (0, 1), got {threshold}")));
            }
            let (model, meta) = load_checkpoint(&ckpt)?;
            let dataset = DataSource::Directory {
                path: data,
                split: Split::Test,
                image_size: None,
            }
            .load()?;
            let report = evaluate_model(&model, &dataset, threshold)?;
            Ok(json!({
                "ckpt": ckpt,
                "role": model.config().role.to_string(),
                "step": meta.step,
                "threshold": threshold,
                "metrics": report.aggregate,
            }))
        }
        Command::Ablate { config } => {
            let cfg = parse_config(&config)?;
            let table = run_ablation(&cfg)?;
            let dir = cfg.run_dir();
            let failed: Vec<&str> = table
                .rows
                .iter()
                .filter(|r| r.status != contrakd::experiments::RowStatus::Ok)
                .map(|r| r.method.as_str())
                .collect();
            Ok(json!({
                "result_table": dir.join(RESULT_TABLE_FILE),
                "runs": dir.join(RUNS_FILE),
                "methods": table.rows.len(),
                "failed": failed,
            }))
        }
        Command::Report { run_dir } => {
            let path = write_report(&run_dir)?;
            Ok(json!({"report": path}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message.replace('\n', " ")}));
            ExitCode::FAILURE
        }
    }
}
