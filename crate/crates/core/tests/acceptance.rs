//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use contrakd::data::{
    build_dataset, load_volume, make_synthetic_dataset, preprocess_volumes, save_volume, volume_to_slices, Dataset,
    DatasetSpec, Split,
};
use contrakd::distillation::{
    distill_with_teacher, holdout_split, train_student_baseline, DiceObjective, DistillObjective, DistillationPlan,
    TeacherObjective, TrainOptions, Trainer,
};
use contrakd::experiments::{run_ablation, BaselineSpec, DataSource, ExperimentConfig, TeacherSpec, RESULT_TABLE_FILE};
use contrakd::losses::{info_nce_loss, pmd_loss};
use contrakd::metrics::{confusion_counts, evaluate_model, one_way_anova};
use contrakd::models::{build_model, count_parameters, ModelConfig, Scale, TapNetwork, UNet};
use contrakd::optim::OptimizerConfig;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_check_all, student_t4_two_sided_p};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn metric_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for pair in 0..100 {
        let (dp, dg) = (rng.gen::<f64>(), rng.gen::<f64>());
        let pred = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen::<f64>() < dp));
        let gt = Array2::from_shape_fn((16, 16), |_| u8::from(rng.gen::<f64>() < dg));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for r in 0..16 {
            for c in 0..16 {
                match (pred[[r, c]], gt[[r, c]]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => tn += 1,
                }
            }
        }
        let union = tp + fp + fn_;
        let oracle_iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        let oracle_dice = if union == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let c = confusion_counts(&pred, &gt).map_err(e2s)?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || format!("pair {pair}: counts {c:?}"))?;
        ensure(c.iou() == oracle_iou, || format!("pair {pair}: iou {} vs {oracle_iou}", c.iou()))?;
        ensure(c.dice() == oracle_dice, || format!("pair {pair}: dice {} vs {oracle_dice}", c.dice()))?;
        let identity = 2.0 * c.iou() / (1.0 + c.iou());
        ensure((c.dice() - identity).abs() <= 1e-12, || {
            format!("pair {pair}: dice {} vs 2iou/(1+iou) {identity}", c.dice())
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("100 pairs exact, {secs:.3}s"))
}

fn loss_closed_forms() -> Check {
    let dev = Device::Cpu;
    let mut worst = Vec::new();
    for b in [2usize, 4, 8] {
        let v: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 1.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let row: Vec<f64> = v.iter().map(|x| x / n).collect();
        let z = Tensor::from_vec(row.repeat(b), (b, 16), &dev).unwrap();
        let l = scalar(&info_nce_loss(&z, &z, 0.07).map_err(e2s)?);
        let want = (b as f64).ln();
        ensure((l - want).abs() <= 1e-6, || format!("InfoNCE B={b}: {l} vs ln B {want}"))?;
        worst.push((l - want).abs());
    }
    let eye = Tensor::eye(3, DType::F64, &dev).unwrap();
    let l = scalar(&info_nce_loss(&eye, &eye, 1.0).map_err(e2s)?);
    let want = (1.0 + 2.0 / std::f64::consts::E).ln();
    ensure((l - want).abs() <= 1e-4 && (l - 0.5514).abs() <= 1e-4, || {
        format!("orthogonal InfoNCE {l} vs {want}")
    })?;

    let logits = Tensor::randn(0f64, 2.0, (2, 1, 8, 8), &dev).unwrap();
    for t in [1.0, 4.0] {
        let p = scalar(&pmd_loss(&logits, &logits, t).map_err(e2s)?);
        ensure(p.abs() <= 1e-4, || format!("PMD identical logits at T={t}: {p}"))?;
    }
    // One pixel: the pair (1, 0) against (0, 1), i.e. logit 1 against -1.
    let s = Tensor::from_vec(vec![1.0f64], (1, 1, 1, 1), &dev).unwrap();
    let t = Tensor::from_vec(vec![-1.0f64], (1, 1, 1, 1), &dev).unwrap();
    let p = scalar(&pmd_loss(&s, &t, 1.0).map_err(e2s)?);
    let (pt, ps) = (1.0 / (1.0 + std::f64::consts::E), std::f64::consts::E / (1.0 + std::f64::consts::E));
    let want_pmd = pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln();
    ensure((p - 0.4621).abs() <= 1e-4 && (p - want_pmd).abs() <= 1e-4, || {
        format!("PMD (1,0) vs (0,1): {p}")
    })?;
    Ok(format!("ln B max err {:.1e}, orthogonal {l:.6}, PMD {p:.6}", worst.iter().cloned().fold(0.0, f64::max)))
}

fn gradient_checks() -> Check {
    let started = Instant::now();
    let report = fd_check_all(1e-4, 7).map_err(e2s)?;
    let secs = started.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for (name, rel) in &report {
        ensure(*rel < 1e-3, || format!("{name}: relative error {rel:.2e}"))?;
        worst = worst.max(*rel);
    }
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    let names: Vec<&str> = report.iter().map(|r| r.0.as_str()).collect();
    Ok(format!("{} worst rel err {worst:.2e}, {secs:.2}s", names.join(",")))
}

fn quick_student() -> ModelConfig {
    ModelConfig::student_s1()
}

fn frozen_teacher_invariant() -> Check {
    let dev = Device::Cpu;
    let data = make_synthetic_dataset(16, (32, 32), 3).map_err(e2s)?;
    let teacher = build_model(&ModelConfig::teacher().with_base_channels(4), 11).map_err(e2s)?;

    let mut plan = DistillationPlan::new("EBD+PMD", Scale::ALL.to_vec(), true);
    plan.student = quick_student();
    plan.embed_dim = 16;
    let before = teacher.checksum().map_err(e2s)?;
    let student = UNet::new(&plan.student, 1, DType::F32, &dev).map_err(e2s)?;
    let objective = DistillObjective::new(&plan, teacher.clone().freeze(), student).map_err(e2s)?;
    let mut trainer = Trainer::new(objective, &plan.optimizer).map_err(e2s)?;
    for step in 0..50 {
        let idx: Vec<usize> = (0..4).map(|k| (step * 4 + k) % data.len()).collect();
        let (x, m) = data.batch(&idx, &dev).map_err(e2s)?;
        trainer.step(&x, &m.expect("labeled")).map_err(e2s)?;
    }
    let after = trainer.objective().teacher.checksum().map_err(e2s)?;
    ensure(after == before, || "teacher checksum changed after 50 distill steps".into())?;

    // With every distillation term off, a distill step is a Dice step.
    let mut plan = DistillationPlan::new("zero", vec![Scale::Bottleneck], false);
    plan.student = quick_student();
    plan.embed_dim = 16;
    plan.weights.w_enc = 0.0;
    plan.weights.w_bn = 0.0;
    plan.weights.w_dec = 0.0;
    let seed = 42;
    let s_kd = UNet::new(&plan.student, seed, DType::F32, &dev).map_err(e2s)?;
    let s_base = UNet::new(&plan.student, seed, DType::F32, &dev).map_err(e2s)?;
    let start = s_base.params().snapshot().map_err(e2s)?;
    let mut kd = Trainer::new(DistillObjective::new(&plan, teacher.freeze(), s_kd).map_err(e2s)?, &plan.optimizer)
        .map_err(e2s)?;
    let mut base = Trainer::new(DiceObjective::new(s_base), &plan.optimizer).map_err(e2s)?;
    let (x, m) = data.batch(&[0, 1, 2, 3], &dev).map_err(e2s)?;
    let m = m.expect("labeled");
    kd.step(&x, &m).map_err(e2s)?;
    base.step(&x, &m).map_err(e2s)?;
    let kd_after = kd.objective().student.params().snapshot().map_err(e2s)?;
    let base_after = base.objective().model.params().snapshot().map_err(e2s)?;
    let mut max_diff = 0.0f64;
    let mut max_delta = 0.0f64;
    for (name, w0) in &start {
        let d_kd = (&kd_after[name] - w0).unwrap();
        let d_base = (&base_after[name] - w0).unwrap();
        let diff = scalar(&(d_kd - &d_base).unwrap().abs().unwrap().max_all().unwrap());
        max_diff = max_diff.max(diff);
        max_delta = max_delta.max(scalar(&d_base.abs().unwrap().max_all().unwrap()));
    }
    ensure(max_delta > 0.0, || "baseline step did not move the student".into())?;
    ensure(max_diff <= 1e-6, || format!("student deltas differ by {max_diff:.2e}"))?;
    Ok(format!("checksum stable over 50 steps; delta gap {max_diff:.1e} (step size {max_delta:.1e})"))
}

/// Teacher used by the smoke-training and KD-effect criteria.
struct SmokeTeacher {
    model: UNet,
    train: Dataset,
    val: Dataset,
}

fn teacher_smoke(slot: &mut Option<SmokeTeacher>) -> Check {
    let started = Instant::now();
    let data = make_synthetic_dataset(200, (64, 64), 7).map_err(e2s)?;
    let (train, val) = holdout_split(&data, 0).map_err(e2s)?;
    let cfg = ModelConfig::teacher().with_base_channels(8);
    let mut opts = TrainOptions::teacher();
    opts.epochs = 1;
    opts.optimizer = OptimizerConfig::Adamw {
        lr: 1e-3,
        weight_decay: 1e-2,
    };
    let model = UNet::new(&cfg, 0, DType::F32, &Device::Cpu).map_err(e2s)?;
    let mut trainer = Trainer::new(TeacherObjective::new(model, 1.0).map_err(e2s)?, &opts.optimizer).map_err(e2s)?;
    let mut reached = None;
    let mut last = 0.0;
    for epoch in 1..=30 {
        opts.seed = epoch as u64;
        trainer.fit(&train, &Dataset::default(), &opts, "teacher").map_err(e2s)?;
        last = evaluate_model(&trainer.objective().model, &val, 0.5).map_err(e2s)?.aggregate.dice;
        if last >= 0.95 {
            reached = Some(epoch);
            break;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    *slot = Some(SmokeTeacher {
        model: trainer.into_objective().model,
        train,
        val,
    });
    let epoch = reached.ok_or_else(|| format!("val Dice {last:.4} after 30 epochs ({secs:.0}s)"))?;
    ensure(secs < 600.0, || format!("reached {last:.4} at epoch {epoch} but took {secs:.0}s"))?;
    Ok(format!("base 8, val Dice {last:.4} at epoch {epoch}, {secs:.0}s"))
}

fn kd_effect(slot: &Option<SmokeTeacher>) -> Check {
    let t = slot.as_ref().ok_or("no teacher from the smoke-training criterion")?;
    let epochs = 40;
    let mut base_iou = Vec::new();
    let mut kd_iou = Vec::new();
    for seed in 0..5u64 {
        let opts = TrainOptions {
            epochs,
            data_fraction: 0.25,
            seed,
            ..TrainOptions::student()
        };
        let base = train_student_baseline(&t.train, &Dataset::default(), &ModelConfig::student_s1(), &opts)
            .map_err(e2s)?;
        base_iou.push(evaluate_model(&base.model, &t.val, 0.5).map_err(e2s)?.aggregate.iou);

        let mut plan = DistillationPlan::new("B+PMD", vec![Scale::Bottleneck], true);
        plan.epochs = epochs;
        plan.data_fraction = 0.25;
        plan.seed = seed;
        let kd = distill_with_teacher(&plan, t.model.clone().freeze(), &t.train, &Dataset::default()).map_err(e2s)?;
        kd_iou.push(evaluate_model(&kd.model, &t.val, 0.5).map_err(e2s)?.aggregate.iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let diffs: Vec<f64> = kd_iou.iter().zip(&base_iou).map(|(k, b)| k - b).collect();
    let md = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let (mk, mb) = (mean(&kd_iou), mean(&base_iou));
    let detail = format!("KD {mk:.4} vs baseline {mb:.4}, paired diff {md:+.4} (sd {sd:.4}), {epochs} epochs");
    ensure(mk >= mb || mb - mk <= sd, || detail.clone())?;
    Ok(detail)
}

fn parameter_counts() -> Check {
    let s1 = count_parameters(&build_model(&ModelConfig::student_s1(), 0).map_err(e2s)?);
    let s2 = count_parameters(&build_model(&ModelConfig::student_s2(), 0).map_err(e2s)?);
    let t1 = count_parameters(&build_model(&ModelConfig::teacher(), 0).map_err(e2s)?);
    let detail = format!("S1 {s1}, S2 {s2}, T1 {t1}");
    ensure(s1 < s2 && s2 < t1, || format!("ordering: {detail}"))?;
    ensure((s1 as f64 - 57_000.0).abs() <= 0.2 * 57_000.0, || format!("S1 off: {detail}"))?;
    ensure((t1 as f64 - 43.23e6).abs() <= 0.2 * 43.23e6, || format!("T1 off: {detail}"))?;
    Ok(detail)
}

fn anova() -> Check {
    let a = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0]]).map_err(e2s)?;
    ensure((a.f_statistic - 1.5).abs() <= 1e-12, || format!("F = {}", a.f_statistic))?;
    // F(1, 4) = t² with 4 degrees of freedom.
    let oracle = student_t4_two_sided_p(1.5f64.sqrt());
    ensure((a.p_value - oracle).abs() <= 1e-3, || format!("p = {} vs oracle {oracle}", a.p_value))?;
    let same = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).map_err(e2s)?;
    ensure(same.f_statistic == 0.0, || format!("identical groups F = {}", same.f_statistic))?;
    Ok(format!("F = {}, p = {:.6} (oracle {oracle:.6})", a.f_statistic, a.p_value))
}

fn png_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn nifti_round_trip() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let vols = tmp.path().join("vols");
    std::fs::create_dir_all(&vols).map_err(e2s)?;
    let vol = Array3::from_shape_fn((20, 24, 3), |(y, x, z)| (y * 24 + x) as f32 * (z + 1) as f32 * 0.75);
    let vol_path = vols.join("pat042.nii.gz");
    save_volume(&vol, &vol_path).map_err(e2s)?;

    let out = tmp.path().join("out");
    preprocess_volumes(&vols, &out, 1.0, 0).map_err(e2s)?;
    let files = png_bytes(&out.join("images"));
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    ensure(
        names == ["image_pat042_0.png", "image_pat042_1.png", "image_pat042_2.png"],
        || format!("files {names:?}"),
    )?;

    let spec = DatasetSpec {
        source_dir: out.clone(),
        split: Split::Train,
        fraction: 1.0,
        seed: 0,
        image_size: (20, 24),
        labeled: false,
    };
    let loaded = build_dataset(&spec).map_err(e2s)?;
    let max = loaded.samples.iter().flat_map(|s| s.image.iter().copied()).max().unwrap_or(0);
    ensure(max == 255, || format!("max pixel {max}"))?;
    let expected = volume_to_slices(&load_volume(&vol_path).map_err(e2s)?.ok_or("volume vanished")?);
    ensure(loaded.len() == expected.len(), || format!("{} slices reloaded", loaded.len()))?;
    for (a, b) in loaded.samples.iter().zip(&expected) {
        ensure(a.image == b.image, || format!("slice {} differs after re-ingestion", a.slice_index))?;
    }
    let again = tmp.path().join("again");
    preprocess_volumes(&vols, &again, 1.0, 0).map_err(e2s)?;
    ensure(png_bytes(&again.join("images")) == files, || "second preprocessing run differs".into())?;
    Ok(format!("{} PNGs, max 255, bit-exact reload", files.len()))
}

fn ablation_config(out: &Path) -> ExperimentConfig {
    let student = ModelConfig::student_s1().with_base_channels(4);
    let mut plans = Vec::new();
    for (name, scales, pmd) in [
        ("B", vec![Scale::Bottleneck], false),
        ("B+PMD", vec![Scale::Bottleneck], true),
        ("E+B+D", Scale::ALL.to_vec(), false),
    ] {
        let mut p = DistillationPlan::new(name, scales, pmd);
        p.student = student.clone();
        p.epochs = 2;
        p.batch_size = 4;
        p.embed_dim = 8;
        plans.push(p);
    }
    ExperimentConfig {
        name: "grid".into(),
        output_dir: out.to_path_buf(),
        dataset: DataSource::Synthetic {
            n: 24,
            image_size: (32, 32),
            seed: 5,
        },
        teacher: TeacherSpec {
            model: ModelConfig::teacher().with_base_channels(2),
            epochs: 2,
            batch_size: 4,
            ..TeacherSpec::default()
        },
        baselines: vec![BaselineSpec {
            student,
            epochs: 2,
            batch_size: 4,
            ..BaselineSpec::default()
        }],
        plans,
        seeds: vec![0, 1],
        plots: false,
        ..ExperimentConfig::example()
    }
}

fn ablation_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut tables = Vec::new();
    for run in ["first", "second"] {
        let cfg = ablation_config(&tmp.path().join(run));
        let table = run_ablation(&cfg).map_err(e2s)?;
        ensure(table.rows.len() == 4, || format!("{} rows", table.rows.len()))?;
        tables.push(std::fs::read(cfg.run_dir().join(RESULT_TABLE_FILE)).map_err(e2s)?);
    }
    ensure(tables[0] == tables[1], || "result tables differ between runs".into())?;
    Ok(format!("{} identical bytes", tables[0].len()))
}

fn main() {
    let mut smoke: Option<SmokeTeacher> = None;
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("{tag} criterion {id}: {name}: {detail}");
        results.push((id, name, outcome));
    };
    record(1, "metric oracle", &mut metric_oracle);
    record(2, "loss closed forms", &mut loss_closed_forms);
    record(3, "gradient checks", &mut gradient_checks);
    record(4, "frozen teacher", &mut frozen_teacher_invariant);
    record(5, "teacher smoke training", &mut || teacher_smoke(&mut smoke));
    record(6, "KD effect", &mut || kd_effect(&smoke));
    record(7, "parameter counts", &mut parameter_counts);
    record(8, "ANOVA", &mut anova);
    record(9, "NIfTI preprocessing", &mut nifti_round_trip);
    record(10, "ablation determinism", &mut ablation_determinism);
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
