use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meim"))
        .args(args)
        .output()
        .expect("run meim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_dataset(dir: &Path) {
    let mut train = String::new();
    for i in 0..12 {
        train.push_str(&format!("e{i}\tr{}\te{}\n", i % 3, (i * 5 + 1) % 12));
    }
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("valid.txt"), "e0\tr1\te3\ne4\tr2\te9\n").unwrap();
    fs::write(dir.join("test.txt"), "e2\tr0\te7\n").unwrap();
}

#[test]
fn no_subcommand_is_usage_error() {
    let o = meim(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = meim(&["param-count", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn param_count_matches_fb15k237() {
    let o = meim(&[
        "param-count",
        "--preset",
        "fb15k-237",
        "--k",
        "3",
        "--ce",
        "100",
        "--cr",
        "100",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "7433400");
}

#[test]
fn param_count_from_dataset_vocabulary() {
    // a dataset with the FB15K-237 vocabulary sizes
    let dir = tempfile::tempdir().unwrap();
    let mut train = String::new();
    for i in 0..14541 {
        train.push_str(&format!("m{i}\tp{}\tm{}\n", i % 237, (i + 1) % 14541));
    }
    fs::write(dir.path().join("train.txt"), train).unwrap();
    fs::write(dir.path().join("valid.txt"), "").unwrap();
    fs::write(dir.path().join("test.txt"), "").unwrap();
    let d = dir.path().to_str().unwrap();
    let o = meim(&[
        "param-count",
        "--data-dir",
        d,
        "--k",
        "3",
        "--ce",
        "100",
        "--cr",
        "100",
    ]);
    assert_eq!(stdout(&o).trim(), "7433400");
}

#[test]
fn param_count_without_sizes_fails() {
    let o = meim(&["param-count", "--k", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let o = meim(&["grad-check", "--sampling", "kvsall", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn train_eval_preprocess_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path());
    let d = dir.path().to_str().unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let log = dir.path().join("log.jsonl");
    let o = meim(&[
        "train",
        "--data-dir",
        d,
        "--k",
        "2",
        "--ce",
        "3",
        "--cr",
        "3",
        "--lambda-ortho",
        "0.1",
        "--lambda-unitnorm",
        "5e-4",
        "--batch-size",
        "4",
        "--epochs",
        "4",
        "--lr",
        "0.01",
        "--lr-decay",
        "0.9",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("best validation MRR"));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);

    let o = meim(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "valid",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let out = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(&out[out.find('{').unwrap()..]).unwrap();
    assert_eq!(json["triple_count"], 2);
    assert!(json["mrr"].as_f64().unwrap() > 0.0);

    // resume continues numbering from the latest state
    let last = dir.path().join("best.ckpt.last");
    let o = meim(&[
        "train",
        "--resume",
        last.to_str().unwrap(),
        "--epochs",
        "6",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let lines: Vec<String> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 6);
    let entry: serde_json::Value = serde_json::from_str(&lines[4]).unwrap();
    assert_eq!(entry["epoch"], 4);
    assert!((entry["lr"].as_f64().unwrap() - 0.01 * 0.9f64.powi(4)).abs() < 1e-15);

    let o = meim(&["preprocess", "--data-dir", d]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("triples.bin").is_file());
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let o = meim(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn zero_epochs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path());
    let o = meim(&[
        "train",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
}
