use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faultline::campaign::read_records;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_faultline"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"{
  "dataset": {"kind": "synth", "classes": 3, "samples_per_class": 40, "shape": [1, 6, 6], "spread": 0.2, "seed": 3},
  "model": {"kind": "small_cnn", "channels": [2, 3], "hidden": 8},
  "train": {"epochs": 4, "lr": 0.01, "batch_size": 16},
  "attribution": {"steps": 8, "output_inputs": 16}
}"#;

fn trained(dir: &Path) -> PathBuf {
    fs::write(dir.join("run.json"), SMALL).unwrap();
    ok(
        dir,
        &[
            "--config", "run.json", "--seed", "1", "train", "--out", "m.ckpt",
        ],
    );
    dir.join("m.ckpt")
}

fn idx_images(magic: u32) -> Vec<u8> {
    let mut v = Vec::new();
    for x in [magic, 2, 2, 2] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(&[0, 10, 20, 30, 40, 50, 60, 70]);
    v
}

fn idx_labels() -> Vec<u8> {
    let mut v = 0x0000_0801u32.to_be_bytes().to_vec();
    v.extend_from_slice(&2u32.to_be_bytes());
    v.extend_from_slice(&[0, 1]);
    v
}

fn manifest(dir: &Path, magic: u32) -> PathBuf {
    fs::write(dir.join("img"), idx_images(magic)).unwrap();
    fs::write(dir.join("lab"), idx_labels()).unwrap();
    let m = dir.join("manifest.json");
    fs::write(
        &m,
        r#"{"name": "tiny", "paths": {"train_images": "img", "train_labels": "lab", "test_images": "img", "test_labels": "lab"}}"#,
    )
    .unwrap();
    m
}

#[test]
fn importance_codes_require_an_attribution_file() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = run(
        dir.path(),
        &[
            "--config",
            "run.json",
            "campaign",
            "--checkpoint",
            "m.ckpt",
            "--code",
            "GBINo",
            "--out",
            "r.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("code GBINo requires --attribution"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn budget_sets_the_row_count() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let args = [
        "--config",
        "run.json",
        "campaign",
        "--checkpoint",
        "m.ckpt",
        "--code",
        "RBRNw",
        "--budget",
        "10",
        "--seed",
        "1",
        "--out",
        "r.csv",
    ];
    ok(dir.path(), &args);
    let (_, rows) = read_records(fs::File::open(dir.path().join("r.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(dir.path().join("r.csv.meta.json").exists());
    assert!(!dir.path().join("r.csv.partial").exists());
}

#[test]
fn full_pipeline_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let d = dir.path();
    ok(
        d,
        &[
            "--config",
            "run.json",
            "attribute",
            "--checkpoint",
            "m.ckpt",
            "--target",
            "w",
            "--out",
            "w.attr",
        ],
    );
    let seeds = [
        "--seed", "1", "--seed", "2", "--seed", "3", "--seed", "4", "--seed", "5",
    ];
    let mut args = vec!["--config", "run.json"];
    args.extend(seeds);
    args.extend([
        "campaign",
        "--checkpoint",
        "m.ckpt",
        "--code",
        "GBINw",
        "--attribution",
        "w.attr",
        "--budget",
        "30",
        "--out",
        "g.csv",
    ]);
    ok(d, &args);
    ok(d, &["report", "g.csv", "--out", "rep"]);
    let summary = fs::read_to_string(d.join("rep/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "code,threshold,seeds,samples,mean_precision,std_precision"
    );
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "GBINw");
        assert_eq!(cols[2], "5");
        let std: f64 = cols[5].parse().unwrap();
        assert!(std >= 0.0);
    }
    assert!(d.join("rep/series.csv").exists());
    assert!(d.join("rep/meta.json").exists());
}

#[test]
fn runs_are_idempotent_and_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let first = fs::read(d.join("m.ckpt")).unwrap();
    ok(
        d,
        &[
            "--config", "run.json", "--seed", "1", "train", "--out", "m2.ckpt",
        ],
    );
    assert_eq!(fs::read(d.join("m2.ckpt")).unwrap(), first);

    let mut outputs = Vec::new();
    for workers in ["1", "2", "8"] {
        let name = format!("r{workers}.csv");
        ok(
            d,
            &[
                "--config",
                "run.json",
                "--seed",
                "1",
                "--seed",
                "2",
                "--workers",
                workers,
                "campaign",
                "--checkpoint",
                "m.ckpt",
                "--code",
                "EBRNo",
                "--budget",
                "40",
                "--no-timing",
                "--out",
                &name,
            ],
        );
        outputs.push(fs::read(d.join(name)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn interrupted_campaigns_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let common = [
        "--config",
        "run.json",
        "--seed",
        "1",
        "--seed",
        "2",
        "campaign",
        "--checkpoint",
        "m.ckpt",
        "--code",
        "LBRNw",
        "--budget",
        "25",
        "--no-timing",
    ];
    let mut full = common.to_vec();
    full.extend(["--out", "full.csv"]);
    ok(d, &full);
    let text = fs::read_to_string(d.join("full.csv")).unwrap();
    // header plus 17 whole rows, then half of the next one
    let lines: Vec<&str> = text.lines().collect();
    let mut partial = lines[..18].join("\n");
    partial.push('\n');
    partial.push_str(&lines[18][..lines[18].len() / 2]);
    fs::write(d.join("resumed.csv.partial"), partial).unwrap();
    let mut resumed = common.to_vec();
    resumed.extend(["--resume", "--out", "resumed.csv"]);
    ok(d, &resumed);
    assert_eq!(fs::read_to_string(d.join("resumed.csv")).unwrap(), text);
}

#[test]
fn exhaustive_campaigns_cover_every_site() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.json"),
        r#"{"dataset": {"kind": "synth", "classes": 2, "samples_per_class": 20, "shape": [3], "spread": 0.1, "seed": 1},
            "model": {"kind": "mlp", "hidden": [2]}, "train": {"epochs": 3}}"#,
    )
    .unwrap();
    ok(d, &["--config", "run.json", "train", "--out", "m.ckpt"]);
    ok(
        d,
        &[
            "--config",
            "run.json",
            "campaign",
            "--checkpoint",
            "m.ckpt",
            "--code",
            "RBRNw",
            "--exhaustive",
            "--out",
            "e.csv",
        ],
    );
    let (_, rows) = read_records(fs::File::open(d.join("e.csv")).unwrap()).unwrap();
    // weights: 3*2 + 2*2 = 10 elements of 32 bits
    assert_eq!(rows.len(), 320);
}

#[test]
fn malformed_idx_files_exit_with_data_status() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 0x0000_0801);
    let out = run(
        dir.path(),
        &["--dataset", m.to_str().unwrap(), "train", "--out", "m.ckpt"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("expected magic 0x00000803"), "{err}");
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn manifest_datasets_train() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 0x0000_0803);
    fs::write(
        dir.path().join("run.json"),
        r#"{"model": {"kind": "mlp", "hidden": []}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "run.json",
            "--dataset",
            m.to_str().unwrap(),
            "train",
            "--out",
            "m.ckpt",
        ],
    );
}

#[test]
fn bad_configs_exit_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"campaign": {"budgett": 3}}"#).unwrap();
    assert_eq!(
        run(d, &["--config", "bad.json", "train", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    fs::write(d.join("v2.json"), r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(
        run(d, &["--config", "v2.json", "train", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(d, &["train"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["--code", "XBINo", "train", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(
            d,
            &["--thresholds", "0.1,0.05", "report", "r.csv", "--out", "o"]
        )
        .status
        .code(),
        Some(4)
    );
}

#[test]
fn missing_inputs_exit_with_runtime_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "campaign",
            "--checkpoint",
            "nope.ckpt",
            "--code",
            "RBRNw",
            "--out",
            "r.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn fat_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("fat.json"),
        r#"{"dataset": {"kind": "synth", "classes": 3, "samples_per_class": 30, "shape": [1, 6, 6], "spread": 0.2, "seed": 3},
            "model": {"kind": "small_cnn", "channels": [2, 3], "hidden": 8},
            "fat": {"epochs": 3, "warmup_epochs": 1, "simulations_per_epoch": 1, "latency_cap": 20, "batch_size": 16,
                    "attribution": {"steps": 4, "output_inputs": 8}}}"#,
    )
    .unwrap();
    let stdout = ok(
        d,
        &["--config", "fat.json", "--seed", "2", "fat", "--out", "fat"],
    );
    assert!(stdout.contains("post_fat="));
    for f in [
        "model.ckpt",
        "baseline.ckpt",
        "report.json",
        "trained_faults.csv",
        "adversary_faults.csv",
        "meta.json",
    ] {
        assert!(d.join("fat").join(f).exists(), "{f}");
    }
    let faults = fs::read_to_string(d.join("fat/trained_faults.csv")).unwrap();
    assert_eq!(faults.lines().count(), 6);
}
