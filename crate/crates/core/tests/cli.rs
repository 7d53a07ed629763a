use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tsvlab");

fn tsvlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("TSVLAB_SEED")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tsvlab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny model and short training so each invocation takes well under a second.
const FAST: &[&str] = &[
    "--n-layers", "2", "--d-model", "8", "--n-heads", "2",
    "--n-initial-epochs", "2", "--n-augmented-epochs", "1",
    "--n-exemplars", "16", "--k-select", "8",
];

fn synth(dir: &Path, name: &str, count: &str, seed: &str) {
    ok(dir, &["synth", "--count", count, "--seed", seed, "--out", name]);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "a.jsonl", "100", "7");
    synth(d, "b.jsonl", "100", "7");
    synth(d, "c.jsonl", "100", "8");
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let text = String::from_utf8(read("a.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "a.jsonl", "20", "11");
    let out = Command::new(BIN)
        .args(["synth", "--count", "20", "--out", "b.jsonl"])
        .current_dir(d)
        .env("TSVLAB_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsvlab(dir.path(), &["synth", "--pi", "1.5", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.jsonl").exists());
    assert_eq!(tsvlab(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for cmd in ["synth", "train", "score", "eval", "ablate", "inspect-norms"] {
        assert!(help.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn out_of_range_layer_names_the_valid_range() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", "7");
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "c.json", "--layer", "99"];
    args.extend_from_slice(FAST);
    let out = tsvlab(d, &args);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("layer 99") && err.contains("0..=1"), "{err}");
    assert!(!d.join("c.json").exists());
}

#[test]
fn train_score_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", "7");
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "c.json", "--log", "log.jsonl", "--test-out", "test.jsonl"];
    args.extend_from_slice(FAST);
    let stdout = ok(d, &args);
    assert!(stdout.trim_end().starts_with("AUROC="), "{stdout}");
    assert_eq!(std::fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count(), 3);

    let eval = ok(d, &["eval", "--ckpt", "c.json", "--data", "test.jsonl", "--out", "report.json"]);
    assert_eq!(eval.trim_end(), stdout.trim_end());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(report["auroc"].is_f64());

    // leaked training ids are refused
    let out = tsvlab(d, &["eval", "--ckpt", "c.json", "--data", "d.jsonl", "--train-data", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(1));

    // three records, one line each
    let three: String = std::fs::read_to_string(d.join("test.jsonl")).unwrap().lines().take(4).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("three.jsonl"), three).unwrap();
    let scores = ok(d, &["score", "--ckpt", "c.json", "--data", "three.jsonl", "--zeta", "0.5"]);
    assert_eq!(scores.lines().count(), 3);
    for line in scores.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 3);
        let s: f64 = f[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(f[2], if s >= 0.5 { "1" } else { "0" });
    }
}

#[test]
fn single_class_evaluation_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", "7");
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "c.json"];
    args.extend_from_slice(FAST);
    ok(d, &args);
    ok(d, &["synth", "--count", "10", "--pi", "0", "--seed", "99", "--out", "t.jsonl"]);
    let out = tsvlab(d, &["eval", "--ckpt", "c.json", "--data", "t.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).to_lowercase().contains("class"), "{}", stderr(&out));
}

#[test]
fn config_file_values_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "64", "7");
    std::fs::write(d.join("cfg.json"), r#"{"n_exemplars": 20, "k_select": 5, "lambda": 2.5}"#).unwrap();
    let mut args = vec!["--config", "cfg.json", "train", "--data", "d.jsonl", "--out", "c.json"];
    args.extend_from_slice(&FAST[..FAST.len() - 4]);
    args.extend_from_slice(&["--lambda", "3"]);
    ok(d, &args);
    let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert_eq!(ck["config"]["n_exemplars"], 20);
    assert_eq!(ck["config"]["k_select"], 5);
    assert_eq!(ck["config"]["lambda"], 3.0);
}

#[test]
fn inspect_norms_reports_both_views() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.jsonl", "40", "7");
    let plain: serde_json::Value = serde_json::from_str(&ok(d, &["inspect-norms", "--data", "d.jsonl"])).unwrap();
    assert_eq!(plain["unsteered"]["count"], 40);
    let mut args = vec!["train", "--data", "d.jsonl", "--out", "c.json"];
    args.extend_from_slice(FAST);
    ok(d, &args);
    let both: serde_json::Value = serde_json::from_str(&ok(d, &["inspect-norms", "--data", "d.jsonl", "--ckpt", "c.json"])).unwrap();
    assert!(both["steered"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["ablate", "--sweep", "k", "--values", "4,8", "--count", "64", "--out", "t.tsv"];
    args.extend_from_slice(FAST);
    let table = ok(d, &args);
    assert_eq!(table.lines().next(), Some("value\tauroc\tpl_acc"));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(d.join("t.tsv")).unwrap(), table);
}
