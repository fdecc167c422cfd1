//! End-to-end checks that go through the installed binary: the guidance
//! sweep fixtures and byte-level reproducibility from an echoed config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_microdiff"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn criterion_07_guidance_sweep_fixtures() {
    for (name, expect) in [("guidance_base.json", 2.0), ("guidance_large.json", 1.2)] {
        let out = run_ok(bin().args(["sweep", "--fixture"]).arg(fixture(name)));
        let parsed: serde_json::Value =
            serde_json::from_slice(&out.stdout).expect("sweep prints JSON");
        let best = parsed["best_w"].as_f64().expect("best_w field");
        assert_eq!(best, expect, "{name}: best_w {best}, expected {expect}");
        let rows = parsed["rows"].as_u64().expect("rows field");
        assert_eq!(rows, 8, "{name}: expected the full sweep table");
    }
    println!("criterion 07 (guidance sweep picks the fixture minimum): PASS");
}

/// A deliberately tiny run so training finishes in seconds.
fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 7,
        "backbone": {
            "patch": 2, "hidden": 16, "depth": 1, "heads": 2,
            "cond_dim": 8, "latent_channels": 12, "max_tokens": 64
        },
        "embedder": { "dim": 8, "seed": 17 },
        "train": {
            "lr": 1e-3, "weight_decay": 0.03, "cond_dropout": 0.1,
            "seed": 7, "log_every": 10
        },
        "stages": [
            { "stage": 1, "divisor": 4, "steps": 30, "batch": 4 },
            { "stage": 2, "divisor": 2, "steps": 30, "batch": 4 }
        ],
        "sampler": { "kind": "dpm2", "steps": 6, "guidance": { "w": 1.0 }, "seed": 7 },
        "corpus": { "generator": "textures", "n": 4, "resolution": 32, "seed": 7 }
    })
}

#[test]
fn criterion_15_cli_reproducibility() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg_path = tmp.path().join("tiny.json");
    std::fs::write(&cfg_path, tiny_config().to_string()).unwrap();
    let run_a = tmp.path().join("runA");
    let run_b = tmp.path().join("runB");

    // asking for stage 2 without its prerequisite must exit with code 2
    let out = bin()
        .args(["--config"])
        .arg(&cfg_path)
        .args(["--run-dir"])
        .arg(&run_a)
        .args(["train", "--stage", "2"])
        .output()
        .expect("spawn binary");
    assert_eq!(out.status.code(), Some(2), "missing prerequisite must exit 2");
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("structured error on stderr");
    assert_eq!(err["error"], "stage prerequisite");

    run_ok(
        bin()
            .args(["--config"])
            .arg(&cfg_path)
            .args(["--run-dir"])
            .arg(&run_a)
            .args(["train", "--stage", "1"]),
    );
    let ckpt = run_a.join("checkpoints").join("stage1_step30.ckpt");
    assert!(ckpt.exists(), "training must leave a stage-1 checkpoint");
    run_ok(
        bin()
            .args(["--config"])
            .arg(&cfg_path)
            .args(["--run-dir"])
            .arg(&run_a)
            .args(["sample", "--count", "2", "--checkpoint"])
            .arg(&ckpt),
    );

    // the echoed config plus the checkpoint must reproduce every byte
    let echoed = run_a.join("config.json");
    assert!(echoed.exists(), "run dir must contain the resolved config");
    run_ok(
        bin()
            .args(["--config"])
            .arg(&echoed)
            .args(["--run-dir"])
            .arg(&run_b)
            .args(["sample", "--count", "2", "--checkpoint"])
            .arg(&ckpt),
    );
    for k in 0..2 {
        let name = format!("sample_{k:03}.png");
        let a = std::fs::read(run_a.join("samples").join(&name)).unwrap();
        let b = std::fs::read(run_b.join("samples").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between the original and replayed run");
    }
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_a.join("samples").join("samples.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["seeds"].as_array().unwrap().len(), 2);
    assert!(sidecar["config_sha256"].as_str().unwrap().len() == 64);
    println!("criterion 15 (echoed config replays samples byte-for-byte): PASS");
}
