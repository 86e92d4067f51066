use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "C_prime = 32\nD = 64\nencoder_depth = 1\nsrb_hidden = 16\n\n[train]\nbatch_size = 2\nlog_every = 1\n";

fn mguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mguide")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mguide(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "diagnostic is one line: {text}");
    assert!(text.starts_with("error: "), "{text}");
    text
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_tiny(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Generates `n` tiny pairs and trains `steps` steps; returns the final checkpoint.
fn trained(dir: &Path, n: &str, steps: &str) -> (PathBuf, PathBuf) {
    let cfg = write_tiny(dir);
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&["datagen", "--n", n, "--seed", "0", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", steps, "--determinism"]);
    (data, run.join("final.safetensors"))
}

#[test]
fn datagen_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["datagen", "--n", "8", "--seed", "0", "--out", s(&out)]);
    let names: Vec<String> = files(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 16);
    let manifest = names.iter().find(|n| !n.ends_with(".png")).expect("manifest present");
    let text = fs::read_to_string(out.join(manifest)).unwrap();
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn datagen_is_byte_identical_under_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["datagen", "--n", "4", "--determinism", "--out", s(&a)]);
    ok(&["datagen", "--n", "4", "--seed", "0", "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));
    let c = dir.path().join("c");
    ok(&["datagen", "--n", "4", "--seed", "1", "--out", s(&c)]);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn training_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), "4", "2");
    assert!(ckpt.exists());
    let log = fs::read_to_string(ckpt.with_file_name("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let report_dir = dir.path().join("eval");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report_dir), "--per-iteration"]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let per = &report["per_iteration"];
    let entries = per["p_accuracy"].as_array().unwrap().len() + per["p_hat_accuracy"].as_array().unwrap().len();
    assert_eq!(entries, 2 * 2 + 1);
    assert_eq!(report["n_samples"], 4);
    assert!(report_dir.join("report.json").exists());

    let image = dir.path().join("x.png");
    fs::copy(data.join("00000_lr.png"), &image).unwrap();
    let text = ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&image)]);
    assert_eq!(text.lines().count(), 1);
    assert!(dir.path().join("x.sr.png").exists());

    let table = ok(&["profile", "--ckpt", s(&ckpt), "--flops"]);
    assert!(table.lines().any(|l| l.starts_with("total")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("latency_ms")), "{table}");
}

#[test]
fn training_is_byte_identical_under_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, first) = trained(dir.path(), "3", "2");
    let again = dir.path().join("again");
    let cfg = dir.path().join("tiny.toml");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&again), "--steps", "2", "--determinism"]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(again.join("final.safetensors")).unwrap());
    assert_eq!(
        fs::read(first.with_file_name("train_log.jsonl")).unwrap(),
        fs::read(again.join("train_log.jsonl")).unwrap()
    );
}

#[test]
fn resume_continues_to_the_total_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), "3", "1");
    let resumed = dir.path().join("resumed");
    ok(&["train", "--data", s(&data), "--out", s(&resumed), "--steps", "2", "--resume", s(&ckpt)]);
    let log = fs::read_to_string(resumed.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![2]);
}

#[test]
fn usage_errors_exit_2() {
    let out = mguide(&["datagen", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&mguide(&["bogus"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "L = 0\n").unwrap();
    let out = mguide(&["datagen", "--n", "1", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    stderr_line(&out);

    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = mguide(&["datagen", "--n", "1", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    stderr_line(&out);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let out = mguide(&["eval", "--ckpt", s(&missing), "--data", s(dir.path())]);
    assert_eq!(code(&out), 3);
    stderr_line(&out);

    let corrupt = dir.path().join("corrupt.safetensors");
    fs::write(&corrupt, b"garbage").unwrap();
    let out = mguide(&["infer", "--ckpt", s(&corrupt), "--image", s(&corrupt)]);
    assert_eq!(code(&out), 3);
    stderr_line(&out);
}

#[test]
fn mismatched_config_on_resume_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), "2", "1");
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("encoder_depth = 1", "encoder_depth = 2")).unwrap();
    let out = mguide(&["train", "--config", s(&other), "--data", s(&data), "--out", s(dir.path()), "--resume", s(&ckpt)]);
    assert_eq!(code(&out), 3);
    assert!(stderr_line(&out).contains("encoder_depth mismatch"));
}
