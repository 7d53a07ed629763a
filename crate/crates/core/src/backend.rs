//! Embedding backends: the trainer's view of a frozen model.
//!
//! A backend turns token sequences into unnormalized last-token embeddings
//! under a steering vector and answers vector-Jacobian-product requests for
//! the most recent batch. Exactly one batch is in flight per backend: a
//! forward call issues a [`BatchToken`] that is redeemable by one
//! [`vjp_batch`](EmbeddingBackend::vjp_batch) call.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Result, TsvError};
use crate::model::{ForwardTrace, ModelConfig, ModelWeights, SteeringSpec};
use crate::protocol::ExternalBackend;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_session_id() -> u64 {
    NEXT_SESSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    InProcess,
    External,
}

/// How to construct a backend; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendDescriptor {
    InProcess { model: ModelConfig },
    External { command: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchToken(pub(crate) u64);

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub sequence: &'a TokenSequence,
}

#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub token: BatchToken,
    /// One `(id, u)` per requested example, in request order.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

pub trait EmbeddingBackend {
    fn kind(&self) -> BackendKind;

    fn dim(&self) -> usize;

    fn n_layers(&self) -> usize;

    fn session_id(&self) -> u64;

    fn descriptor(&self) -> BackendDescriptor;

    /// Steered forward pass over a batch; retains what the next VJP needs.
    fn forward_batch(&mut self, steer: &SteeringSpec, batch: &[BatchItem<'_>]) -> Result<EmbeddingBatch>;

    /// `sum_i d(g_i . u_i)/dv` over the batch issued under `token`.
    fn vjp_batch(&mut self, token: BatchToken, grads: &[(String, Vec<f64>)]) -> Result<Vec<f64>>;

    /// Embeddings without keeping anything for a backward pass.
    fn embed(
        &mut self,
        steer: Option<&SteeringSpec>,
        batch: &[BatchItem<'_>],
    ) -> Result<Vec<(String, Vec<f64>)>>;

    /// Unsteered next-token logits, when the backend exposes them.
    fn generation_logits(&mut self, _seq: &TokenSequence) -> Result<Vec<f64>> {
        Err(TsvError::Backend("generation logits not available on this backend".into()))
    }
}

pub fn open_backend(desc: &BackendDescriptor) -> Result<Box<dyn EmbeddingBackend>> {
    match desc {
        BackendDescriptor::InProcess { model } => Ok(Box::new(InProcessBackend::new(model)?)),
        BackendDescriptor::External { command } => Ok(Box::new(ExternalBackend::spawn(command)?)),
    }
}

/// [`EmbeddingBackend::embed`] over consecutive chunks of `batch_size`.
pub fn embed_in_batches(
    backend: &mut dyn EmbeddingBackend,
    steer: Option<&SteeringSpec>,
    items: &[BatchItem<'_>],
    batch_size: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    if batch_size == 0 {
        return Err(TsvError::Config("batch size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size) {
        out.extend(backend.embed(steer, chunk)?);
    }
    Ok(out)
}

fn check_unique_ids(batch: &[BatchItem<'_>]) -> Result<()> {
    let mut seen = HashSet::with_capacity(batch.len());
    for item in batch {
        if !seen.insert(item.id) {
            return Err(TsvError::DuplicateId(item.id.to_string()));
        }
    }
    Ok(())
}

/// Matches per-example gradients to the ids of a batch, in batch order.
pub(crate) fn align_grads<'g>(
    ids: &[String],
    grads: &'g [(String, Vec<f64>)],
    dim: usize,
) -> Result<Vec<&'g [f64]>> {
    let mut by_id: HashMap<&str, &[f64]> = HashMap::with_capacity(grads.len());
    for (id, g) in grads {
        if g.len() != dim {
            return Err(TsvError::DimensionMismatch { expected: dim, got: g.len() });
        }
        if by_id.insert(id.as_str(), g.as_slice()).is_some() {
            return Err(TsvError::DuplicateId(id.clone()));
        }
    }
    if by_id.len() != ids.len() {
        return Err(TsvError::IdMismatch(format!(
            "{} gradients for a batch of {}",
            by_id.len(),
            ids.len()
        )));
    }
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| TsvError::IdMismatch(format!("missing gradient for {id}")))
        })
        .collect()
}

/// Drives the toy transformer directly.
pub struct InProcessBackend {
    weights: Arc<ModelWeights>,
    session: u64,
    next_token: u64,
    pending: Option<(BatchToken, Vec<(String, ForwardTrace)>)>,
}

impl InProcessBackend {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::from_weights(Arc::new(ModelWeights::init(cfg)?)))
    }

    pub fn from_weights(weights: Arc<ModelWeights>) -> Self {
        Self {
            weights,
            session: next_session_id(),
            next_token: 0,
            pending: None,
        }
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }
}

impl EmbeddingBackend for InProcessBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::InProcess
    }

    fn dim(&self) -> usize {
        self.weights.d_model()
    }

    fn n_layers(&self) -> usize {
        self.weights.n_layers()
    }

    fn session_id(&self) -> u64 {
        self.session
    }

    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::InProcess {
            model: self.weights.config().clone(),
        }
    }

    fn forward_batch(&mut self, steer: &SteeringSpec, batch: &[BatchItem<'_>]) -> Result<EmbeddingBatch> {
        // a new forward invalidates any unredeemed token
        self.pending = None;
        check_unique_ids(batch)?;
        let mut traces = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        for item in batch {
            let (u, trace) = self
                .weights
                .forward_last_token(item.sequence, Some(steer))
                .map_err(|e| match e {
                    TsvError::NonFinite(msg) => TsvError::NonFinite(format!("example {}: {msg}", item.id)),
                    other => other,
                })?;
            traces.push((item.id.to_string(), trace));
            embeddings.push((item.id.to_string(), u));
        }
        self.next_token += 1;
        let token = BatchToken(self.next_token);
        self.pending = Some((token, traces));
        Ok(EmbeddingBatch { token, embeddings })
    }

    fn vjp_batch(&mut self, token: BatchToken, grads: &[(String, Vec<f64>)]) -> Result<Vec<f64>> {
        match &self.pending {
            Some((t, _)) if *t == token => {}
            _ => return Err(TsvError::StaleBatch),
        }
        let d = self.dim();
        let ids: Vec<String> = self.pending.as_ref().unwrap().1.iter().map(|(id, _)| id.clone()).collect();
        let aligned = align_grads(&ids, grads, d)?;
        let (_, traces) = self.pending.take().expect("checked above");
        let mut total = vec![0.0; d];
        for ((_, trace), g) in traces.into_iter().zip(aligned) {
            let part = trace.vjp_steering(g)?;
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        Ok(total)
    }

    fn embed(
        &mut self,
        steer: Option<&SteeringSpec>,
        batch: &[BatchItem<'_>],
    ) -> Result<Vec<(String, Vec<f64>)>> {
        batch
            .iter()
            .map(|item| {
                self.weights
                    .embed_last_token(item.sequence, steer)
                    .map(|u| (item.id.to_string(), u))
            })
            .collect()
    }

    fn generation_logits(&mut self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.weights.generation_logits(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Location;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 4,
            vocab_size: 32,
            max_seq_len: 16,
            rmsnorm_eps: 1e-6,
            embedding_std: 1.0,
            seed: 9,
        }
    }

    fn seqs(n: usize, seed: u64) -> Vec<(String, TokenSequence)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let len = rng.random_range(2..9);
                let toks = (0..len).map(|_| rng.random_range(0..32)).collect();
                (format!("x{i}"), TokenSequence::new(toks, 1).unwrap())
            })
            .collect()
    }

    fn items(s: &[(String, TokenSequence)]) -> Vec<BatchItem<'_>> {
        s.iter().map(|(id, q)| BatchItem { id, sequence: q }).collect()
    }

    fn steer(seed: u64, strength: f64) -> SteeringSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
        SteeringSpec::new(v, 1, strength, Location::Residual)
    }

    #[test]
    fn open_in_process_reports_dimension() {
        let b = open_backend(&BackendDescriptor::InProcess { model: cfg() }).unwrap();
        assert_eq!(b.dim(), 16);
        assert_eq!(b.n_layers(), 4);
        assert_eq!(b.kind(), BackendKind::InProcess);
    }

    #[test]
    fn matches_direct_model_calls() {
        let mut b = InProcessBackend::new(&cfg()).unwrap();
        let w = ModelWeights::init(&cfg()).unwrap();
        let s = seqs(8, 1);
        let st = steer(2, 5.0);
        let out = b.forward_batch(&st, &items(&s)).unwrap();
        for ((id, u), (sid, q)) in out.embeddings.iter().zip(&s) {
            assert_eq!(id, sid);
            assert_eq!(u, &w.embed_last_token(q, Some(&st)).unwrap());
        }
        let zero = b.forward_batch(&st.with_strength(0.0), &items(&s[..1])).unwrap();
        assert_eq!(zero.embeddings[0].1, w.embed_last_token(&s[0].1, None).unwrap());
    }

    #[test]
    fn batch_order_does_not_change_embeddings() {
        let mut b = InProcessBackend::new(&cfg()).unwrap();
        let s = seqs(2, 3);
        let st = steer(4, 5.0);
        let ab = b.forward_batch(&st, &items(&s)).unwrap();
        let rev: Vec<_> = s.iter().rev().cloned().collect();
        let ba = b.forward_batch(&st, &items(&rev)).unwrap();
        assert_eq!(ab.embeddings[0], ba.embeddings[1]);
        assert_eq!(ab.embeddings[1], ba.embeddings[0]);
    }

    #[test]
    fn vjp_is_additive_over_the_batch() {
        let weights = Arc::new(ModelWeights::init(&cfg()).unwrap());
        let mut b = InProcessBackend::from_weights(Arc::clone(&weights));
        let s = seqs(4, 5);
        let st = steer(6, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grads: Vec<(String, Vec<f64>)> = s
            .iter()
            .map(|(id, _)| (id.clone(), (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let tok = b.forward_batch(&st, &items(&s)).unwrap().token;
        let total = b.vjp_batch(tok, &grads).unwrap();

        let mut sum = vec![0.0; 16];
        for ((_, q), (_, g)) in s.iter().zip(&grads) {
            let (_, tr) = weights.forward_last_token(q, Some(&st)).unwrap();
            for (a, x) in sum.iter_mut().zip(tr.vjp_steering(g).unwrap()) {
                *a += x;
            }
        }
        let diff = total.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff:e}");

        let tok = b.forward_batch(&st, &items(&s[..1])).unwrap().token;
        let single = b.vjp_batch(tok, &grads[..1]).unwrap();
        let (_, tr) = weights.forward_last_token(&s[0].1, Some(&st)).unwrap();
        assert_eq!(single, tr.vjp_steering(&grads[0].1).unwrap());

        let zeros: Vec<_> = s.iter().map(|(id, _)| (id.clone(), vec![0.0; 16])).collect();
        let tok = b.forward_batch(&st, &items(&s)).unwrap().token;
        assert_eq!(b.vjp_batch(tok, &zeros).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn token_discipline() {
        let mut b = InProcessBackend::new(&cfg()).unwrap();
        let s = seqs(2, 8);
        let st = steer(9, 1.0);
        let g: Vec<_> = s.iter().map(|(id, _)| (id.clone(), vec![1.0; 16])).collect();

        let t1 = b.forward_batch(&st, &items(&s)).unwrap().token;
        // missing gradient leaves the token redeemable
        assert!(matches!(b.vjp_batch(t1, &g[..1]), Err(TsvError::IdMismatch(_))));
        b.vjp_batch(t1, &g).unwrap();
        assert!(matches!(b.vjp_batch(t1, &g), Err(TsvError::StaleBatch)));

        let t2 = b.forward_batch(&st, &items(&s)).unwrap().token;
        let _t3 = b.forward_batch(&st, &items(&s)).unwrap().token;
        assert!(matches!(b.vjp_batch(t2, &g), Err(TsvError::StaleBatch)));

        let dup = vec![s[0].clone(), s[0].clone()];
        assert!(matches!(b.forward_batch(&st, &items(&dup)), Err(TsvError::DuplicateId(_))));
    }
}
