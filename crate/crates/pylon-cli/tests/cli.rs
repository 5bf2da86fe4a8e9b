//! End-to-end CLI contract tests, including the determinism acceptance
//! criterion: identical config+seed must reproduce training and evaluation
//! outputs byte for byte (timestamps excluded).

use std::path::Path;
use std::process::Command;

fn pylon() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pylon"))
}

fn run_ok(args: &[&str]) {
    let out = pylon().args(args).output().expect("spawn pylon");
    assert!(
        out.status.success(),
        "pylon {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(args: &[&str]) -> i32 {
    let out = pylon().args(args).output().expect("spawn pylon");
    out.status.code().expect("exit code")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// train_log.csv with the wall-clock `seconds` column removed; everything
/// else must match exactly across reruns.
fn strip_seconds(log: &str) -> String {
    log.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

/// Fast dataset + model settings shared by the CLI tests.
const TINY: &str = r#"{
    "synth.n_images": 60, "synth.image_size": 32, "synth.seed": 9,
    "model.input_size": 32, "model.stage_channels": [4, 4, 8, 8],
    "model.decoder_channels": 8,
    "train.max_epochs": 2, "train.batch_size": 16, "train.lr0": 1e-3,
    "eval.k_overlays": 1
}"#;

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", TINY);
    let data = dir.path().join("data");
    run_ok(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);

    let mut logs = Vec::new();
    for run in ["t1", "t2"] {
        let out = dir.path().join(run);
        run_ok(&[
            "train", "--config", &cfg, "--data", data.to_str().unwrap(),
            "--out", out.to_str().unwrap(), "--variant", "pylon", "--seed", "3",
        ]);
        logs.push(read(&out.join("train_log.csv")));
    }
    let train_same = strip_seconds(&logs[0]) == strip_seconds(&logs[1]);

    let mut metrics = Vec::new();
    for run in ["e1", "e2"] {
        let out = dir.path().join(run);
        run_ok(&[
            "eval", "--config", &cfg, "--data", data.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--ckpt", dir.path().join("t1/best.ckpt").to_str().unwrap(),
        ]);
        metrics.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let eval_same = metrics[0] == metrics[1];

    println!(
        "[acceptance] criterion 9 (determinism): {}",
        if train_same && eval_same { "PASS" } else { "FAIL" }
    );
    assert!(train_same, "train_log.csv differs between identical runs");
    assert!(eval_same, "metrics.csv differs between identical eval runs");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"synth.n_images": 0}"#);
    assert_eq!(exit_code(&["synth", "--config", &bad, "--out", dir.path().join("d").to_str().unwrap()]), 2);

    let cfg = write_config(dir.path(), "cfg.json", TINY);
    let data = dir.path().join("data");
    run_ok(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(
        exit_code(&[
            "train", "--config", &cfg, "--data", data.to_str().unwrap(),
            "--out", dir.path().join("t").to_str().unwrap(), "--variant", "resnet",
        ]),
        2
    );
}

#[test]
fn missing_annotations_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", TINY);
    let data = dir.path().join("data");
    run_ok(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    let out = dir.path().join("t");
    run_ok(&[
        "train", "--config", &cfg, "--data", data.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--variant", "backbone", "--seed", "0",
    ]);
    // Drop every box annotation; eval must refuse with the dedicated code.
    std::fs::write(data.join("bboxes.csv"), "image_id,class,x,y,w,h\n").unwrap();
    assert_eq!(
        exit_code(&[
            "eval", "--config", &cfg, "--data", data.to_str().unwrap(),
            "--out", dir.path().join("e").to_str().unwrap(),
            "--ckpt", out.join("best.ckpt").to_str().unwrap(),
        ]),
        5
    );
}

#[test]
fn seed_range_creates_one_run_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", TINY);
    let data = dir.path().join("data");
    run_ok(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    let out = dir.path().join("sweep");
    run_ok(&[
        "train", "--config", &cfg, "--data", data.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--variant", "backbone", "--seeds", "0..2",
    ]);
    for seed in 0..=2 {
        let run = out.join(format!("seed_{seed}"));
        for artifact in ["config.json", "best.ckpt", "train_log.csv"] {
            assert!(run.join(artifact).is_file(), "missing {artifact} for seed {seed}");
        }
    }
}

#[test]
fn audit_flags_gap_variant_but_not_circular_pylon() {
    let dir = tempfile::tempdir().unwrap();
    // The default audit shifts are multiples of 32, so the input must be
    // larger than 32 pixels for the shift to be non-trivial.
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        r#"{"model.input_size": 64, "model.stage_channels": [4, 4, 8, 8], "model.decoder_channels": 8}"#,
    );

    let gap_out = dir.path().join("gap");
    run_ok(&["audit", "--config", &cfg, "--out", gap_out.to_str().unwrap(), "--variant", "decoder_gap"]);
    let report = read(&gap_out.join("report.csv"));
    assert!(
        report.lines().skip(1).any(|l| l.ends_with("true")),
        "decoder_gap audit flagged no node:\n{report}"
    );

    let py_out = dir.path().join("pylon");
    run_ok(&[
        "audit", "--config", &cfg, "--out", py_out.to_str().unwrap(),
        "--variant", "pylon", "--pad", "circular",
    ]);
    let report = read(&py_out.join("report.csv"));
    assert!(
        report.lines().skip(1).all(|l| l.ends_with("false")),
        "circular pylon audit flagged a node:\n{report}"
    );
}
