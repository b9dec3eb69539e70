use std::path::Path;
use std::process::{Command, Output};

fn flmm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flmm")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "flmm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.jsonl");
    let cfg = dir.path().join("train.toml");
    let ckpt = dir.path().join("heads.flmm");
    let log = dir.path().join("log.csv");
    let report = dir.path().join("report.json");
    std::fs::write(&cfg, "batch_size = 2\nepochs = 1\nmax_steps = 2\n").unwrap();

    flmm(&["--seed", "3", "synth", "--n", "4", "--out", s(&data)]);
    flmm(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--log", s(&log)]);
    let rows = std::fs::read_to_string(&log).unwrap();
    assert_eq!(rows.lines().count(), 3, "header plus one row per step");

    flmm(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.is_object());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.jsonl");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 1.0\n").unwrap();
    flmm(&["synth", "--n", "1", "--out", s(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_flmm"))
        .args(["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn selftest_passes() {
    let out = flmm(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.is_empty() && !text.contains("FAIL"), "{text}");
}
