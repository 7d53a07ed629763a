use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use serde_json::{json, Value};
use tsvlab::backend::{BatchItem, EmbeddingBackend, InProcessBackend};
use tsvlab::data::TokenSequence;
use tsvlab::model::{Location, ModelConfig, SteeringSpec};
use tsvlab::protocol::ExternalBackend;
use tsvlab::TsvError;

const BIN: &str = env!("CARGO_BIN_EXE_tsvlab");

fn toy_command() -> Vec<String> {
    [BIN, "serve-toy", "--vocab-size", "16", "--n-layers", "2", "--d-model", "8", "--n-heads", "2", "--model-seed", "3"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 16,
        seed: 3,
        ..Default::default()
    }
}

fn sequences() -> Vec<(String, TokenSequence)> {
    (0..4u32)
        .map(|i| (format!("x{i}"), TokenSequence::new(vec![i, 2 * i % 16, 9, 15 - i, 4], 2).unwrap()))
        .collect()
}

#[test]
fn subprocess_backend_agrees_with_in_process() {
    let mut ext = ExternalBackend::spawn(&toy_command()).unwrap();
    let mut local = InProcessBackend::new(&toy_config()).unwrap();
    assert_eq!((ext.dim(), ext.n_layers()), (8, 2));
    let seqs = sequences();
    let items: Vec<BatchItem<'_>> = seqs.iter().map(|(id, s)| BatchItem { id, sequence: s }).collect();
    let steer = SteeringSpec::new(vec![0.2, -0.1, 0.0, 0.3, 0.1, -0.4, 0.25, 0.05], 1, 5.0, Location::AttnOutput);

    let a = ext.forward_batch(&steer, &items).unwrap();
    let b = local.forward_batch(&steer, &items).unwrap();
    for ((ia, ua), (ib, ub)) in a.embeddings.iter().zip(&b.embeddings) {
        assert_eq!(ia, ib);
        for (x, y) in ua.iter().zip(ub) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
    let grads: Vec<(String, Vec<f64>)> = seqs.iter().map(|(id, _)| (id.clone(), vec![0.5; 8])).collect();
    let ga = ext.vjp_batch(a.token, &grads).unwrap();
    let gb = local.vjp_batch(b.token, &grads).unwrap();
    for (x, y) in ga.iter().zip(&gb) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
    }
    assert!(matches!(ext.vjp_batch(a.token, &grads), Err(TsvError::StaleBatch)));

    let plain = ext.embed(None, &items).unwrap();
    assert_eq!(plain.len(), 4);
    ext.shutdown().unwrap();
}

#[test]
fn raw_transcript_against_the_toy_server() {
    let mut child = Command::new(BIN)
        .args(&toy_command()[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |req: Value| -> Value {
        writeln!(stdin, "{req}").unwrap();
        stdin.flush().unwrap();
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    };
    let hello = ask(json!({"op": "hello", "version": 1}));
    assert_eq!(hello, json!({"ok": true, "version": 1, "d": 8, "n_layers": 2}));
    let forward = ask(json!({
        "op": "forward", "batch_id": "b1", "layer": 0, "lambda": 1.0, "location": "residual",
        "v": vec![0.0; 8], "examples": [{"id": "a", "tokens": [1, 2, 3]}]
    }));
    assert_eq!(forward["ok"], true);
    assert_eq!(forward["batch_id"], "b1");
    assert_eq!(forward["embeddings"][0]["u"].as_array().unwrap().len(), 8);
    let second = ask(json!({
        "op": "forward", "batch_id": "b2", "layer": 0, "lambda": 1.0, "location": "residual",
        "v": vec![0.0; 8], "examples": [{"id": "a", "tokens": [1]}]
    }));
    assert_eq!(second["ok"], false, "one batch in flight at a time");
    let stale = ask(json!({"op": "vjp", "batch_id": "b0", "grads": [{"id": "a", "g": vec![0.0; 8]}]}));
    assert_eq!(stale["ok"], false);
    assert!(stale["error"].is_string());
    let vjp = ask(json!({"op": "vjp", "batch_id": "b1", "grads": [{"id": "a", "g": vec![1.0; 8]}]}));
    assert_eq!(vjp["ok"], true);
    assert_eq!(vjp["grad_v"].as_array().unwrap().len(), 8);
    assert_eq!(ask(json!({"op": "shutdown"})), json!({"ok": true}));
    assert!(child.wait().unwrap().success());
}

#[test]
fn version_mismatch_is_reported() {
    let script = r#"read line; echo '{"ok":true,"version":2,"d":4,"n_layers":1}'; read line"#;
    let cmd: Vec<String> = ["sh", "-c", script].iter().map(|s| s.to_string()).collect();
    match ExternalBackend::spawn(&cmd) {
        Err(TsvError::VersionMismatch { .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake accepted version 2"),
    }
}

#[test]
fn missing_adapter_is_an_error() {
    let cmd = vec!["/nonexistent/adapter".to_string()];
    assert!(ExternalBackend::spawn(&cmd).is_err());
}
