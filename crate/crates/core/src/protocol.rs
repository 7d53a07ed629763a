//! Wire protocol v1 for external embedding backends: newline-delimited JSON
//! over the adapter's stdin/stdout.
//!
//! ```text
//! -> {"op":"hello","version":1}
//! <- {"ok":true,"version":1,"d":4096,"n_layers":32}
//! -> {"op":"forward","batch_id":"b1","layer":16,"lambda":5.0,"location":"residual","v":[..],"examples":[{"id":"a","tokens":[..]}]}
//! <- {"ok":true,"batch_id":"b1","embeddings":[{"id":"a","u":[..]}]}
//! -> {"op":"vjp","batch_id":"b1","grads":[{"id":"a","g":[..]}]}
//! <- {"ok":true,"batch_id":"b1","grad_v":[..]}
//! -> {"op":"shutdown"}
//! <- {"ok":true}
//! ```
//!
//! Failures are `{"ok":false,"error":"..."}`. [`ExternalBackend`] is the
//! client; [`serve`] is a reference adapter backed by the toy transformer.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{
    align_grads, next_session_id, BackendDescriptor, BackendKind, BatchItem, BatchToken,
    EmbeddingBackend, EmbeddingBatch,
};
use crate::data::TokenSequence;
use crate::error::{Result, TsvError};
use crate::model::{ForwardTrace, Location, ModelWeights, SteeringSpec};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello {
        version: u64,
    },
    Forward {
        batch_id: String,
        layer: usize,
        lambda: f64,
        location: Location,
        v: Vec<f64>,
        examples: Vec<WireExample>,
    },
    Vjp {
        batch_id: String,
        grads: Vec<WireGrad>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireExample {
    pub id: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGrad {
    pub id: String,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedding {
    pub id: String,
    pub u: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct HelloReply {
    version: u64,
    d: usize,
    n_layers: usize,
}

#[derive(Debug, Deserialize)]
struct ForwardReply {
    batch_id: String,
    embeddings: Vec<WireEmbedding>,
}

#[derive(Debug, Deserialize)]
struct VjpReply {
    batch_id: String,
    grad_v: Vec<f64>,
}

fn ensure_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(TsvError::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Client side of the protocol, normally talking to a child process.
pub struct ExternalBackend {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    command: Vec<String>,
    dim: usize,
    n_layers: usize,
    session: u64,
    next_batch: u64,
    pending: Option<(BatchToken, String, Vec<String>)>,
}

impl ExternalBackend {
    /// Launches `command` and performs the handshake.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| TsvError::Config("empty adapter command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TsvError::Backend(format!("failed to launch {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut backend = Self::connect(BufReader::new(stdout), stdin, command.to_vec())?;
        backend.child = Some(child);
        Ok(backend)
    }

    /// Handshake over an existing stream pair.
    pub fn connect<R, W>(reader: R, writer: W, command: Vec<String>) -> Result<Self>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut b = Self {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
            command,
            dim: 0,
            n_layers: 0,
            session: next_session_id(),
            next_batch: 0,
            pending: None,
        };
        let hello: HelloReply = b.call(&Request::Hello {
            version: PROTOCOL_VERSION as u64,
        })?;
        if hello.version != PROTOCOL_VERSION as u64 {
            return Err(TsvError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                found: hello.version,
            });
        }
        if hello.d == 0 {
            return Err(TsvError::Protocol("adapter reported d = 0".into()));
        }
        b.dim = hello.d;
        b.n_layers = hello.n_layers;
        Ok(b)
    }

    fn call<T: for<'de> Deserialize<'de>>(&mut self, req: &Request) -> Result<T> {
        let line = serde_json::to_string(req).map_err(|e| TsvError::Protocol(e.to_string()))?;
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(TsvError::Backend("adapter closed its output".into()));
        }
        let v: Value = serde_json::from_str(&reply)
            .map_err(|e| TsvError::Protocol(format!("malformed reply: {e}")))?;
        match v.get("ok").and_then(Value::as_bool) {
            Some(true) => serde_json::from_value(v).map_err(|e| TsvError::Protocol(format!("unexpected reply: {e}"))),
            Some(false) => Err(TsvError::Backend(
                v.get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified adapter error")
                    .to_string(),
            )),
            None => Err(TsvError::Protocol("reply without \"ok\" field".into())),
        }
    }

    fn forward_raw(&mut self, steer: &SteeringSpec, batch: &[BatchItem<'_>]) -> Result<(String, Vec<(String, Vec<f64>)>)> {
        if steer.v.len() != self.dim {
            return Err(TsvError::DimensionMismatch { expected: self.dim, got: steer.v.len() });
        }
        ensure_finite(&steer.v, "steering vector")?;
        self.next_batch += 1;
        let batch_id = format!("b{}", self.next_batch);
        let req = Request::Forward {
            batch_id: batch_id.clone(),
            layer: steer.layer,
            lambda: steer.strength,
            location: steer.location,
            v: steer.v.clone(),
            examples: batch
                .iter()
                .map(|it| WireExample {
                    id: it.id.to_string(),
                    tokens: it.sequence.tokens().to_vec(),
                })
                .collect(),
        };
        let reply: ForwardReply = self.call(&req)?;
        if reply.batch_id != batch_id {
            return Err(TsvError::Protocol(format!(
                "reply for batch {} while expecting {batch_id}",
                reply.batch_id
            )));
        }
        let mut by_id: std::collections::HashMap<String, Vec<f64>> =
            reply.embeddings.into_iter().map(|e| (e.id, e.u)).collect();
        let mut out = Vec::with_capacity(batch.len());
        for it in batch {
            let u = by_id
                .remove(it.id)
                .ok_or_else(|| TsvError::Protocol(format!("no embedding for {}", it.id)))?;
            if u.len() != self.dim {
                return Err(TsvError::DimensionMismatch { expected: self.dim, got: u.len() });
            }
            ensure_finite(&u, &format!("embedding of example {}", it.id))?;
            out.push((it.id.to_string(), u));
        }
        Ok((batch_id, out))
    }

    fn vjp_raw(&mut self, batch_id: &str, grads: Vec<WireGrad>) -> Result<Vec<f64>> {
        let reply: VjpReply = self.call(&Request::Vjp {
            batch_id: batch_id.to_string(),
            grads,
        })?;
        if reply.batch_id != batch_id || reply.grad_v.len() != self.dim {
            return Err(TsvError::Protocol("vjp reply does not match request".into()));
        }
        ensure_finite(&reply.grad_v, "grad_v")?;
        Ok(reply.grad_v)
    }

    pub fn shutdown(&mut self) -> Result<()> {
        let _: Value = self.call(&Request::Shutdown)?;
        if let Some(mut child) = self.child.take() {
            child.wait()?;
        }
        Ok(())
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = writeln!(self.writer, "{{\"op\":\"shutdown\"}}");
            let _ = self.writer.flush();
            let mut line = String::new();
            let _ = self.reader.read_line(&mut line);
            let _ = child.wait();
        }
    }
}

impl EmbeddingBackend for ExternalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::External
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn session_id(&self) -> u64 {
        self.session
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::External {
            command: self.command.clone(),
        }
    }

    fn forward_batch(&mut self, steer: &SteeringSpec, batch: &[BatchItem<'_>]) -> Result<EmbeddingBatch> {
        if let Some((_, id, ids)) = self.pending.take() {
            // release the adapter's retained batch
            let zeros = ids.into_iter().map(|id| WireGrad { id, g: vec![0.0; self.dim] }).collect();
            self.vjp_raw(&id, zeros)?;
        }
        let (batch_id, embeddings) = self.forward_raw(steer, batch)?;
        let token = BatchToken(self.next_batch);
        let ids = embeddings.iter().map(|(id, _)| id.clone()).collect();
        self.pending = Some((token, batch_id, ids));
        Ok(EmbeddingBatch { token, embeddings })
    }

    fn vjp_batch(&mut self, token: BatchToken, grads: &[(String, Vec<f64>)]) -> Result<Vec<f64>> {
        let (batch_id, ids) = match &self.pending {
            Some((t, b, ids)) if *t == token => (b.clone(), ids.clone()),
            _ => return Err(TsvError::StaleBatch),
        };
        let aligned = align_grads(&ids, grads, self.dim)?;
        for g in &aligned {
            ensure_finite(g, "upstream gradient")?;
        }
        let wire = ids
            .iter()
            .zip(aligned)
            .map(|(id, g)| WireGrad { id: id.clone(), g: g.to_vec() })
            .collect();
        self.pending = None;
        self.vjp_raw(&batch_id, wire)
    }

    fn embed(
        &mut self,
        steer: Option<&SteeringSpec>,
        batch: &[BatchItem<'_>],
    ) -> Result<Vec<(String, Vec<f64>)>> {
        let inert = SteeringSpec::new(vec![0.0; self.dim], 0, 0.0, Location::Residual);
        let st = steer.unwrap_or(&inert);
        let out = self.forward_batch(st, batch)?;
        let (_, batch_id, ids) = self.pending.take().expect("forward sets pending");
        let zeros = ids.into_iter().map(|id| WireGrad { id, g: vec![0.0; self.dim] }).collect();
        self.vjp_raw(&batch_id, zeros)?;
        Ok(out.embeddings)
    }
}

// ---------------------------------------------------------------------------
// reference adapter

fn error_reply(msg: impl Into<String>) -> Value {
    serde_json::json!({"ok": false, "error": msg.into()})
}

struct ServerState {
    weights: Arc<ModelWeights>,
    pending: Option<(String, Vec<(String, ForwardTrace)>)>,
}

impl ServerState {
    fn handle(&mut self, req: Request) -> (Value, bool) {
        match req {
            Request::Hello { version } => {
                if version != PROTOCOL_VERSION as u64 {
                    return (error_reply(format!("unsupported protocol version {version}")), false);
                }
                (
                    serde_json::json!({
                        "ok": true,
                        "version": PROTOCOL_VERSION,
                        "d": self.weights.d_model(),
                        "n_layers": self.weights.n_layers(),
                    }),
                    false,
                )
            }
            Request::Forward { batch_id, layer, lambda, location, v, examples } => {
                if let Some((pending, _)) = &self.pending {
                    return (error_reply(format!("batch {pending} is still awaiting vjp")), false);
                }
                let steer = SteeringSpec::new(v, layer, lambda, location);
                let mut traces = Vec::with_capacity(examples.len());
                let mut embeddings = Vec::with_capacity(examples.len());
                for ex in examples {
                    let result = TokenSequence::new(ex.tokens, 1)
                        .and_then(|seq| self.weights.forward_last_token(&seq, Some(&steer)));
                    match result {
                        Ok((u, tr)) => {
                            embeddings.push(WireEmbedding { id: ex.id.clone(), u });
                            traces.push((ex.id, tr));
                        }
                        Err(e) => return (error_reply(format!("example {}: {e}", ex.id)), false),
                    }
                }
                self.pending = Some((batch_id.clone(), traces));
                (
                    serde_json::json!({"ok": true, "batch_id": batch_id, "embeddings": embeddings}),
                    false,
                )
            }
            Request::Vjp { batch_id, grads } => {
                let ids: Vec<String> = match &self.pending {
                    Some((b, traces)) if *b == batch_id => traces.iter().map(|(id, _)| id.clone()).collect(),
                    _ => return (error_reply(format!("unknown or stale batch_id {batch_id}")), false),
                };
                let pairs: Vec<(String, Vec<f64>)> = grads.into_iter().map(|g| (g.id, g.g)).collect();
                let aligned = match align_grads(&ids, &pairs, self.weights.d_model()) {
                    Ok(a) => a,
                    Err(e) => return (error_reply(e.to_string()), false),
                };
                let (_, traces) = self.pending.take().expect("checked above");
                let mut total = vec![0.0; self.weights.d_model()];
                for ((_, tr), g) in traces.into_iter().zip(aligned) {
                    match tr.vjp_steering(g) {
                        Ok(part) => total.iter_mut().zip(part).for_each(|(t, p)| *t += p),
                        Err(e) => return (error_reply(e.to_string()), false),
                    }
                }
                (serde_json::json!({"ok": true, "batch_id": batch_id, "grad_v": total}), false)
            }
            Request::Shutdown => (serde_json::json!({"ok": true}), true),
        }
    }
}

/// Serves protocol v1 from `reader` to `writer` until shutdown or end of input.
/// Malformed requests get an error reply and the loop continues.
pub fn serve<R: BufRead, W: Write>(weights: Arc<ModelWeights>, reader: R, mut writer: W) -> Result<()> {
    let mut state = ServerState { weights, pending: None };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = match serde_json::from_str::<Request>(&line) {
            Ok(req) => state.handle(req),
            Err(e) => (error_reply(format!("bad request: {e}")), false),
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
        if stop {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::InProcessBackend;
    use crate::model::ModelConfig;

    fn weights() -> Arc<ModelWeights> {
        Arc::new(
            ModelWeights::init(&ModelConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                vocab_size: 16,
                max_seq_len: 8,
                rmsnorm_eps: 1e-6,
                embedding_std: 1.0,
                seed: 1,
            })
            .unwrap(),
        )
    }

    /// Runs the reference server on a thread, connected through OS pipes.
    fn connected() -> (ExternalBackend, std::thread::JoinHandle<()>) {
        let (req_r, req_w) = std::io::pipe().unwrap();
        let (rep_r, rep_w) = std::io::pipe().unwrap();
        let w = weights();
        let h = std::thread::spawn(move || serve(w, BufReader::new(req_r), rep_w).unwrap());
        let b = ExternalBackend::connect(BufReader::new(rep_r), req_w, vec!["pipe".into()]).unwrap();
        (b, h)
    }

    fn transcript(lines: &[&str]) -> Vec<Value> {
        let input = lines.join("\n");
        let mut out = Vec::new();
        serve(weights(), input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn server_handshake_and_errors() {
        let r = transcript(&[
            r#"{"op":"hello","version":1}"#,
            r#"{"op":"hello","version":2}"#,
            r#"{"op":"vjp","batch_id":"nope","grads":[]}"#,
            r#"not json"#,
            r#"{"op":"forward","batch_id":"a","layer":0,"lambda":1.0,"location":"residual","v":[0,0,0,0,0,0,0,0],"examples":[{"id":"x","tokens":[1,2]}]}"#,
            r#"{"op":"forward","batch_id":"b","layer":0,"lambda":1.0,"location":"residual","v":[0,0,0,0,0,0,0,0],"examples":[{"id":"x","tokens":[1,2]}]}"#,
            r#"{"op":"shutdown"}"#,
            r#"{"op":"hello","version":1}"#,
        ]);
        assert_eq!(r.len(), 7, "nothing is answered after shutdown");
        assert_eq!(r[0]["ok"], true);
        assert_eq!(r[0]["d"], 8);
        assert_eq!(r[0]["n_layers"], 2);
        for i in [1, 2, 3, 5] {
            assert_eq!(r[i]["ok"], false, "reply {i}");
        }
        assert_eq!(r[4]["ok"], true);
        assert_eq!(r[6], serde_json::json!({"ok": true}));
    }

    #[test]
    fn client_over_pipes_matches_in_process() {
        let (mut ext, h) = connected();
        assert_eq!(ext.dim(), 8);
        assert_eq!(ext.n_layers(), 2);
        let mut local = InProcessBackend::from_weights(weights());
        let seqs: Vec<(String, TokenSequence)> = (0..3)
            .map(|i| (format!("e{i}"), TokenSequence::new(vec![i, 3, 5, 7 - i], 2).unwrap()))
            .collect();
        let items: Vec<BatchItem<'_>> = seqs.iter().map(|(id, s)| BatchItem { id, sequence: s }).collect();
        let steer = SteeringSpec::new((0..8).map(|i| 0.1 * i as f64 - 0.3).collect(), 1, 5.0, Location::MlpOutput);
        let a = ext.forward_batch(&steer, &items).unwrap();
        let b = local.forward_batch(&steer, &items).unwrap();
        for ((ia, ua), (ib, ub)) in a.embeddings.iter().zip(&b.embeddings) {
            assert_eq!(ia, ib);
            for (x, y) in ua.iter().zip(ub) {
                assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
            }
        }
        let grads: Vec<(String, Vec<f64>)> = seqs.iter().map(|(id, _)| (id.clone(), vec![0.5; 8])).collect();
        let ga = ext.vjp_batch(a.token, &grads).unwrap();
        let gb = local.vjp_batch(b.token, &grads).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
        assert!(matches!(ext.vjp_batch(a.token, &grads), Err(TsvError::StaleBatch)));

        // inference-only calls release the adapter's batch so training can continue
        let e1 = ext.embed(Some(&steer), &items).unwrap();
        let e2 = ext.embed(None, &items).unwrap();
        assert_eq!(e1.len(), 3);
        assert_ne!(e1[0].1, e2[0].1);
        let again = ext.forward_batch(&steer, &items).unwrap();
        assert_eq!(again.embeddings, a.embeddings);

        ext.shutdown().unwrap();
        h.join().unwrap();
    }

    #[test]
    fn client_rejects_version_mismatch() {
        let reply = "{\"ok\":true,\"version\":2,\"d\":4,\"n_layers\":2}\n";
        let r = ExternalBackend::connect(BufReader::new(reply.as_bytes()), Vec::new(), vec![]);
        assert!(matches!(r, Err(TsvError::VersionMismatch { expected: 1, found: 2 })));
        let err = "{\"ok\":false,\"error\":\"boom\"}\n";
        let r = ExternalBackend::connect(BufReader::new(err.as_bytes()), Vec::new(), vec![]);
        assert!(matches!(r, Err(TsvError::Backend(m)) if m == "boom"));
    }
}
