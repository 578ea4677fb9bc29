//! End-to-end runs of the `nsmb` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn bundled_text() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gandk_small.cfg"))
        .unwrap()
}

/// The bundled config shrunk to a few seconds of work.
fn small_text() -> String {
    bundled_text()
        .replace("budget = 20000", "budget = 2000")
        .replace("max_epochs = 1000", "max_epochs = 20")
        .replace("bootstraps = 100", "bootstraps = 20")
        .replace("steps = 20", "steps = 5")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn nsmb(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_nsmb"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn bundled_config_writes_every_artifact_and_beats_the_likelihood_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gandk_small.cfg");
    let out = tmp.path().join("conj");
    assert_eq!(
        nsmb(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]),
        0
    );
    for file in [
        "simulate/manifest.json",
        "simulate/bank.csv",
        "train/model.bin",
        "train/model.json",
        "calibrate/trace.csv",
        "infer/posterior.json",
        "infer/samples.csv",
        "metrics/metrics.json",
        "run.jsonl",
    ] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let records = std::fs::read_to_string(out.join("run.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 5);
    let trace = std::fs::read_to_string(out.join("calibrate/trace.csv")).unwrap();
    // header, β₀ and one row per update
    assert_eq!(trace.lines().count(), 22);

    let nle_text = bundled_text()
        .replace("method = \"nsm-conj\"", "method = \"nle\"")
        .replace(
            "family = \"ebm\"\nt_hidden = 128\nb_hidden = 128\nstandardize_theta = false",
            "family = \"mdn\"\ncomponents = 10\nhidden = [50, 50]",
        );
    let nle_cfg = write_config(tmp.path(), "nle.cfg", &nle_text);
    let nle_out = tmp.path().join("nle");
    assert_eq!(
        nsmb(&[
            "run",
            "--config",
            path_str(&nle_cfg),
            "--out",
            path_str(&nle_out)
        ]),
        0
    );
    let conj = read_json(&out.join("metrics/metrics.json"));
    let nle = read_json(&nle_out.join("metrics/metrics.json"));
    let (a, b) = (conj["mse"].as_f64().unwrap(), nle["mse"].as_f64().unwrap());
    assert!(a < b, "conjugate MSE {a} vs likelihood MSE {b}");
}

#[test]
fn reruns_with_the_same_seed_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", &small_text());
    let runs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("run{k}"))).collect();
    for out in &runs {
        assert_eq!(
            nsmb(&[
                "run",
                "--config",
                path_str(&cfg),
                "--out",
                path_str(out),
                "--seed",
                "7"
            ]),
            0
        );
    }
    for file in [
        "infer/samples.csv",
        "infer/posterior.json",
        "train/model.bin",
    ] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        let b = std::fs::read(runs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between reruns");
    }
}

#[test]
fn recalibration_reuses_the_trained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", &small_text());
    let base = tmp.path().join("base");
    assert_eq!(
        nsmb(&["run", "--config", path_str(&cfg), "--out", path_str(&base)]),
        0
    );
    let train_manifest = std::fs::read(base.join("train/manifest.json")).unwrap();

    let other = write_config(
        tmp.path(),
        "other.cfg",
        &small_text()
            .replace("beta0 = 0.1", "beta0 = 5.0")
            .replace("steps = 5", "steps = 1"),
    );
    let again = tmp.path().join("again");
    for stage in ["calibrate", "infer"] {
        let code = nsmb(&[
            stage,
            "--config",
            path_str(&other),
            "--out",
            path_str(&again),
            "--from",
            path_str(&base),
        ]);
        assert_eq!(code, 0, "{stage}");
    }
    assert!(!again.join("train").exists(), "no retraining");
    assert_eq!(
        std::fs::read(base.join("train/manifest.json")).unwrap(),
        train_manifest
    );
    let b0 = read_json(&base.join("calibrate/manifest.json"))["beta"]
        .as_f64()
        .unwrap();
    let b1 = read_json(&again.join("calibrate/manifest.json"))["beta"]
        .as_f64()
        .unwrap();
    assert_ne!(b0, b1);
}

#[test]
fn tampered_model_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", &small_text());
    let base = tmp.path().join("base");
    for stage in ["simulate", "train"] {
        assert_eq!(
            nsmb(&[stage, "--config", path_str(&cfg), "--out", path_str(&base)]),
            0
        );
    }
    let model = base.join("train/model.bin");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&model, bytes).unwrap();
    let out = tmp.path().join("next");
    let code = nsmb(&[
        "calibrate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--from",
        path_str(&base),
    ]);
    assert_eq!(code, 4);
}

#[test]
fn rerunning_a_stage_into_the_same_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", &small_text());
    let out = tmp.path().join("out");
    assert_eq!(
        nsmb(&[
            "simulate",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out)
        ]),
        0
    );
    assert_eq!(
        nsmb(&[
            "simulate",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out)
        ]),
        4
    );
}

#[test]
fn invalid_configs_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let unknown = write_config(
        tmp.path(),
        "unknown.cfg",
        &format!("bogus = 1\n{}", small_text()),
    );
    assert_eq!(
        nsmb(&[
            "run",
            "--config",
            path_str(&unknown),
            "--out",
            path_str(&out)
        ]),
        2
    );
    let incoherent = write_config(
        tmp.path(),
        "nle_ebm.cfg",
        &small_text().replace("method = \"nsm-conj\"", "method = \"nle\""),
    );
    assert_eq!(
        nsmb(&[
            "run",
            "--config",
            path_str(&incoherent),
            "--out",
            path_str(&out)
        ]),
        2
    );
    let missing = tmp.path().join("absent.cfg");
    assert_eq!(
        nsmb(&[
            "run",
            "--config",
            path_str(&missing),
            "--out",
            path_str(&out)
        ]),
        2
    );
    assert!(!out.exists());
}
