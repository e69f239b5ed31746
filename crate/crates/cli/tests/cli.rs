use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use birotate::nn::checkpoint::push_blob;

fn birotate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_birotate")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    let mut words = text.split_whitespace();
    while let Some(w) = words.next() {
        if w == key {
            return words.next().unwrap().parse().unwrap();
        }
    }
    panic!("{key} not in {text}");
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(birotate(&["--help"]).status.code(), Some(0));
    assert_eq!(birotate(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(birotate(&["train", "--variant", "C"]).status.code(), Some(2));
    assert_eq!(birotate(&["analyze"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = birotate(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));

    // Truncated blob: the input was accepted, parsing it fails.
    let blob = dir.path().join("w.bin");
    fs::write(&blob, [4u8, 0, 0, 0, 0, 0, 0, 0, 1, 2]).unwrap();
    let o = birotate(&["analyze", "--weights", path(&blob)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_dataset_names_the_flag() {
    let o = birotate(&["train", "--dataset", "mnist", "--out", "/tmp/unused-birotate-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data-dir"), "{}", stderr(&o));

    let o = birotate(&["train", "--dataset", "mnist", "--data-dir", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data-dir /definitely/not/here"), "{}", stderr(&o));
}

#[test]
fn analyze_synthetic() {
    let o = birotate(&["analyze", "--synthetic", "256", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("factorization (16, 16)"));
    assert!(field(&text, "cos_after") >= field(&text, "cos_before"));

    let o = birotate(&["analyze", "--synthetic", "1", "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("n 1 factorization (1, 1)"));
}

#[test]
fn analyze_weight_blobs_writes_one_row_per_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let blob = dir.path().join("w.bin");
    let mut bytes = Vec::new();
    push_blob(&mut bytes, &birotate::data::synthetic_gaussian_weights(64, 1));
    push_blob(&mut bytes, &birotate::data::synthetic_gaussian_weights(30, 2));
    fs::write(&blob, bytes).unwrap();
    let out = dir.path().join("report");
    let o = birotate(&["analyze", "--weights", path(&blob), "--identity-start", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("analysis.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("blob0,64,8,8,"));
    assert!(lines[2].starts_with("blob1,30,5,6,"));
}

#[test]
fn bench_single_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = birotate(&["bench", "--sizes", "16", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("n,n1,n2,"));
    assert!(lines[1].starts_with("16,4,4,"));
    let diff: f64 = lines[1].split(',').nth(6).unwrap().parse().unwrap();
    assert!(diff < 1e-9);
}

#[test]
fn bench_sizes_agree_at_64() {
    let row = birotate_cli::bench::bench_size(64, 1, 3).unwrap();
    assert_eq!((row.n1, row.n2), (8, 8));
    assert!(row.max_abs_diff < 1e-9);
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = birotate(&[
        "train", "--dataset", "synthetic", "--variant", "B", "--epochs", "2", "--seed", "4", "--out", path(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch ")).count(), 2);
    for f in ["manifest.toml", "metrics.csv", "layers.csv", "cosine.svg", "hist_dense2.svg", "checkpoint/manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let manifest = fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("variant = \"B\""));
    assert!(manifest.contains("tool_version"));

    let o = birotate(&["eval", "--checkpoint", path(&run.join("checkpoint"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = field(&stdout(&o), "accuracy");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_test_acc: f64 = metrics.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((acc - last_test_acc).abs() < 0.02, "eval {acc} vs train-time {last_test_acc}");

    let o = birotate(&["analyze", "--checkpoint", path(&run.join("checkpoint"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("dense2,16384,")));

    let o = birotate(&["eval", "--checkpoint", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
