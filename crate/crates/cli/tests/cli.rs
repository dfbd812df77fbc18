use std::path::Path;
use std::process::{Command, Output};

use contrakd::data::save_volume;
use ndarray::Array3;
use serde_json::{json, Value};

fn contrakd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contrakd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn stderr_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line: {text}");
    serde_json::from_str(lines[0]).expect("stderr is JSON")
}

fn tiny_config(dir: &Path) -> Value {
    let student = json!({"role": "student_s1", "base_channels": 4});
    json!({
        "name": "tiny",
        "output_dir": dir.join("runs"),
        "dataset": {"kind": "synthetic", "n": 12, "image_size": [32, 32], "seed": 3},
        "teacher": {
            "model": {"role": "teacher_mt_unet", "base_channels": 2, "with_recon_head": true},
            "epochs": 1,
            "batch_size": 4
        },
        "baselines": [{"student": student, "epochs": 1, "batch_size": 4}],
        "plans": [
            {"name": "B", "student": student, "epochs": 1, "batch_size": 4, "embed_dim": 8},
            {"name": "B+PMD", "student": student, "epochs": 1, "batch_size": 4, "embed_dim": 8, "pmd": true}
        ],
        "seeds": [0, 1]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_are_one_json_line() {
    let err = stderr_error(&contrakd(&["distill", "--config"]));
    assert_eq!(err["error"], "usage");
    let err = stderr_error(&contrakd(&["frobnicate"]));
    assert_eq!(err["error"], "usage");
}

#[test]
fn help_exits_zero() {
    let out = contrakd(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ablate"));
}

#[test]
fn missing_config_reports_io_error() {
    let err = stderr_error(&contrakd(&["ablate", "--config", "/nonexistent/cfg.json"]));
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/cfg.json"));
}

#[test]
fn config_typo_reports_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg["plans"][0]["wieghts"] = json!({});
    let path = write_config(dir.path(), &cfg);
    let err = stderr_error(&contrakd(&["train-teacher", "--config", &path]));
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("/plans/0/wieghts"), "{err}");
}

#[test]
fn unknown_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny_config(dir.path()));
    let err = stderr_error(&contrakd(&["distill", "--config", &path, "--plan", "nope"]));
    assert_eq!(err["error"], "config");
}

#[test]
fn prep_slices_volumes_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let vols = dir.path().join("vols");
    std::fs::create_dir_all(vols.join("labels")).unwrap();
    let img = Array3::from_shape_fn((16, 16, 3), |(y, x, z)| (y * 16 + x + z * 7) as f32);
    let lab = Array3::from_shape_fn((16, 16, 3), |(y, x, _)| f32::from(u8::from(y > 4 && x > 4)));
    save_volume(&img, &vols.join("case7.nii.gz")).unwrap();
    save_volume(&lab, &vols.join("labels").join("case7.nii.gz")).unwrap();
    let out_dir = dir.path().join("png");
    let v = stdout_json(&contrakd(&[
        "prep",
        "--in",
        vols.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(v["summary"]["slices"], 3);
    assert_eq!(v["summary"]["masks"], 3);
    for i in 0..3 {
        assert!(out_dir.join("images").join(format!("image_case7_{i}.png")).is_file());
        assert!(out_dir.join("masks").join(format!("mask_case7_{i}.png")).is_file());
    }
    let err = stderr_error(&contrakd(&[
        "prep",
        "--in",
        vols.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--fraction",
        "0",
    ]));
    assert_eq!(err["error"], "invalid_argument");
}

#[test]
fn full_pipeline_on_tiny_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let run_dir = dir.path().join("runs").join("tiny");

    let t = stdout_json(&contrakd(&["train-teacher", "--config", &cfg]));
    let teacher_ckpt = t["ckpt"].as_str().unwrap().to_string();
    assert!(Path::new(&teacher_ckpt).is_file());

    let s = stdout_json(&contrakd(&["train-student", "--config", &cfg, "--baseline"]));
    assert_eq!(s["runs"].as_array().unwrap().len(), 2);
    assert!(run_dir.join("baseline").join("1").join("ckpt.safetensors").is_file());

    let d = stdout_json(&contrakd(&["distill", "--config", &cfg, "--plan", "B+PMD"]));
    assert_eq!(d["runs"][0]["status"], "OK");
    let student_ckpt = run_dir.join("B+PMD").join("0").join("ckpt.safetensors");
    assert!(student_ckpt.is_file());

    let a = stdout_json(&contrakd(&["ablate", "--config", &cfg]));
    assert_eq!(a["methods"], 3);
    assert_eq!(a["failed"].as_array().unwrap().len(), 0);
    let table = std::fs::read_to_string(run_dir.join("result_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    let r = stdout_json(&contrakd(&["report", "--run-dir", run_dir.to_str().unwrap()]));
    let md = std::fs::read_to_string(r["report"].as_str().unwrap()).unwrap();
    assert!(md.contains("F = "), "{md}");
    assert!(md.contains("(baseline)"));

    // The synthetic corpus is not on disk; score against a prepared one.
    let corpus = dir.path().join("corpus");
    let ds = contrakd::data::make_synthetic_dataset(4, (32, 32), 9).unwrap();
    contrakd::data::write_slice_corpus(&ds.samples, &corpus).unwrap();
    let e = stdout_json(&contrakd(&[
        "eval",
        "--ckpt",
        student_ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--threshold",
        "0.5",
    ]));
    assert_eq!(e["metrics"]["n_images"], 4);
    assert_eq!(e["role"], "student_s1");
    let iou = e["metrics"]["iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));

    let err = stderr_error(&contrakd(&[
        "eval",
        "--ckpt",
        student_ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--threshold",
        "1.5",
    ]));
    assert_eq!(err["error"], "invalid_argument");
}

#[test]
fn eval_rejects_a_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.safetensors");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let err = stderr_error(&contrakd(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(err["error"], "checkpoint");
}
