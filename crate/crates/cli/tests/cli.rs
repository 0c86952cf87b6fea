use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 11,
  "corpus": {
    "counts": {
      "TRAIN": [4, 3, 3],
      "TEST1": [1, 0, 1],
      "TEST2": [1, 1, 1]
    }
  },
  "generator": {"size": 16},
  "pipeline": {
    "epochs": 2,
    "lr": 0.01,
    "batch_size": 8,
    "input_size": 8,
    "stage1": {
      "channels": [2, 3, 3, 4], "strides": [1, 1, 2, 1], "kernel": 3, "pool": 2,
      "primary_dim": 4, "hidden_capsules": [[3, 4]], "class_dim": 4
    },
    "stage2": {
      "channels": [2, 2, 2, 2], "strides": [1, 1, 2, 1], "kernel": 3, "pool": 2,
      "primary_dim": 4, "hidden_capsules": [[2, 4]], "class_dim": 4
    }
  },
  "enhancement": {"tau": 0.5, "epochs": 1, "sets": ["TEST1", "TEST2"]}
}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsule-triage"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(&[]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--stage", "3", "--data", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["report", "--data", p(&dir.path().join("missing.ndjson")), "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1, "{err}");

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sead": 1}"#).unwrap();
    let out = cli(&["gen-data", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn subcommands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (data, bench, ens) = (root.join("data"), root.join("bench"), root.join("ens"));
    let c = p(&cfg);

    ok(&["gen-data", "--config", c, "--out", p(&data)]);
    assert!(data.join("corpus.json").is_file());

    ok(&["train", "--config", c, "--stage", "1", "--data", p(&data), "--out", p(&bench)]);
    ok(&["train", "--config", c, "--stage", "2", "--data", p(&data), "--out", p(&bench)]);
    assert!(bench.join("stage1.ckpt").is_file() && bench.join("stage2.ckpt").is_file());

    let log = root.join("bench.ndjson");
    ok(&["infer", "--config", c, "--bench", p(&bench), "--data", p(&data.join("test2")), "--out", p(&log)]);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);

    let (t1, t2) = (data.join("test1"), data.join("test2"));
    ok(&["enhance", "--config", c, "--bench", p(&bench), "--tests", p(&t1), p(&t2), "--out", p(&ens)]);

    let report = root.join("ens.json");
    let ens_log = root.join("ens.ndjson");
    ok(&["evaluate", "--ens", p(&ens), "--target", "test2", "--report", p(&report), "--out", p(&ens_log)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"comparisons\""));

    let from_logs = root.join("cmp.json");
    ok(&["report", "--data", p(&ens_log), "--bench", p(&log), "--report", p(&from_logs)]);
    assert!(fs::read_to_string(&from_logs).unwrap().contains("\"TOTAL\""));

    let again = root.join("again.json");
    ok(&["evaluate", "--ens", p(&ens), "--target", "TEST2", "--report", p(&again)]);
    assert_eq!(fs::read_to_string(&again).unwrap(), text);
}
