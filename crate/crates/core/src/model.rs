//! A small frozen causal transformer with steering-vector injection.
//!
//! Pre-norm blocks: RMSNorm, multi-head causal self-attention, RMSNorm,
//! GELU MLP, each branch added back to the residual stream. A final RMSNorm
//! produces the last-token embedding `u`. Weights are regenerated from the
//! config seed and never change after construction.
//!
//! The steering vector is added, scaled by its strength, at every token
//! position of one layer. [`ForwardTrace`] keeps the activations from the
//! injection layer upward so [`ForwardTrace::vjp_steering`] can return the
//! exact gradient of `grad_u . u` with respect to the steering vector.

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Result, TsvError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    /// Standard deviation of the token and position embeddings.
    pub embedding_std: f64,
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            vocab_size: 64,
            max_seq_len: 64,
            rmsnorm_eps: 1e-6,
            embedding_std: 0.05,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(TsvError::Config("n_layers must be >= 2".into()));
        }
        if self.d_model < 4 {
            return Err(TsvError::Config("d_model must be >= 4".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TsvError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(TsvError::Config("vocab_size and max_seq_len must be positive".into()));
        }
        if !(self.embedding_std > 0.0) || !self.embedding_std.is_finite() {
            return Err(TsvError::Config("embedding_std must be positive".into()));
        }
        if !(self.rmsnorm_eps > 0.0) {
            return Err(TsvError::Config("rmsnorm_eps must be positive".into()));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn d_hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// Where the steering vector enters a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// Added to the block input stream.
    Residual,
    /// Added to the MLP branch output before its residual addition.
    MlpOutput,
    /// Added to the attention branch output before its residual addition.
    AttnOutput,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Residual, Location::MlpOutput, Location::AttnOutput];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Residual => "residual",
            Location::MlpOutput => "mlp_output",
            Location::AttnOutput => "attn_output",
        }
    }
}

impl std::str::FromStr for Location {
    type Err = TsvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Location::Residual),
            "mlp_output" => Ok(Location::MlpOutput),
            "attn_output" => Ok(Location::AttnOutput),
            other => Err(TsvError::Config(format!("unknown steering location {other:?}"))),
        }
    }
}

/// The steering vector together with where and how strongly it is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub v: Vec<f64>,
    pub layer: usize,
    pub strength: f64,
    pub location: Location,
}

impl SteeringSpec {
    pub fn new(v: Vec<f64>, layer: usize, strength: f64, location: Location) -> Self {
        Self {
            v,
            layer,
            strength,
            location,
        }
    }

    /// True when the injection adds exactly nothing.
    pub fn is_inert(&self) -> bool {
        self.strength == 0.0 || self.v.iter().all(|&x| x == 0.0)
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// weights

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    attn_gain: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    mlp_gain: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

/// Frozen transformer parameters, fully determined by [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    cfg: ModelConfig,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    layers: Vec<LayerWeights>,
    final_gain: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

impl ModelWeights {
    /// Seeded Gaussian initialization: embeddings with `embedding_std`, projections
    /// scaled by `1/sqrt(fan_in)`, all RMSNorm gains one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let h = cfg.d_hidden();
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = gaussian(&mut rng, cfg.vocab_size * d, cfg.embedding_std);
        let pos_emb = gaussian(&mut rng, cfg.max_seq_len * d, cfg.embedding_std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_gain: vec![1.0; d],
                wq: gaussian(&mut rng, d * d, sd),
                wk: gaussian(&mut rng, d * d, sd),
                wv: gaussian(&mut rng, d * d, sd),
                wo: gaussian(&mut rng, d * d, sd),
                mlp_gain: vec![1.0; d],
                w_up: gaussian(&mut rng, d * h, sd),
                w_down: gaussian(&mut rng, h * d, 1.0 / (h as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_gain: vec![1.0; d],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    /// Row `token` of the embedding table.
    pub fn token_embedding(&self, token: u32) -> &[f64] {
        let d = self.cfg.d_model;
        &self.tok_emb[token as usize * d..(token as usize + 1) * d]
    }

    /// Hash of every parameter's bit pattern, for frozen-weight checks.
    pub fn checksum(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |xs: &[f64]| {
            for x in xs {
                x.to_bits().hash(&mut hasher);
            }
        };
        feed(&self.tok_emb);
        feed(&self.pos_emb);
        for l in &self.layers {
            for m in [
                &l.attn_gain,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_gain,
                &l.w_up,
                &l.w_down,
            ] {
                feed(m);
            }
        }
        feed(&self.final_gain);
        hasher.finish()
    }

    fn check_inputs(&self, seq: &TokenSequence, steer: Option<&SteeringSpec>) -> Result<()> {
        if seq.len() > self.cfg.max_seq_len {
            return Err(TsvError::SequenceTooLong {
                len: seq.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if let Some(&t) = seq
            .tokens()
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(TsvError::InvalidSequence(format!(
                "token {t} outside vocab of size {}",
                self.cfg.vocab_size
            )));
        }
        if let Some(s) = steer {
            if s.v.len() != self.cfg.d_model {
                return Err(TsvError::DimensionMismatch {
                    expected: self.cfg.d_model,
                    got: s.v.len(),
                });
            }
            if s.layer >= self.cfg.n_layers {
                return Err(TsvError::Config(format!(
                    "steering layer {} outside valid range 0..{}",
                    s.layer, self.cfg.n_layers
                )));
            }
            if !s.strength.is_finite() || s.v.iter().any(|x| !x.is_finite()) {
                return Err(TsvError::NonFinite("steering vector or strength".into()));
            }
        }
        Ok(())
    }

    fn embed_tokens(&self, seq: &TokenSequence) -> Vec<f64> {
        let d = self.cfg.d_model;
        let mut x = Vec::with_capacity(seq.len() * d);
        for (t, &tok) in seq.tokens().iter().enumerate() {
            let e = self.token_embedding(tok);
            let p = &self.pos_emb[t * d..(t + 1) * d];
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        x
    }

    /// Unnormalized final-layer last-token embedding and the trace needed to
    /// differentiate it with respect to the steering vector.
    pub fn forward_last_token(
        self: &Arc<Self>,
        seq: &TokenSequence,
        steer: Option<&SteeringSpec>,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        let (u, parts) = self.run(seq, steer, true)?;
        let parts = parts.expect("trace requested");
        Ok((
            u,
            ForwardTrace {
                weights: Arc::clone(self),
                parts,
            },
        ))
    }

    /// Same as [`forward_last_token`](Self::forward_last_token) without
    /// retaining activations.
    pub fn embed_last_token(&self, seq: &TokenSequence, steer: Option<&SteeringSpec>) -> Result<Vec<f64>> {
        self.run(seq, steer, false).map(|(u, _)| u)
    }

    /// Next-token logits of the unsteered model (tied output embedding).
    pub fn generation_logits(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let u = self.embed_last_token(seq, None)?;
        let d = self.cfg.d_model;
        Ok(self
            .tok_emb
            .chunks_exact(d)
            .map(|row| dot(row, &u))
            .collect())
    }

    fn run(
        &self,
        seq: &TokenSequence,
        steer: Option<&SteeringSpec>,
        keep_trace: bool,
    ) -> Result<(Vec<f64>, Option<TraceParts>)> {
        self.check_inputs(seq, steer)?;
        let d = self.cfg.d_model;
        let t_len = seq.len();
        let shift: Option<(usize, Location, Vec<f64>)> = steer.and_then(|s| {
            (!s.is_inert()).then(|| (s.layer, s.location, s.v.iter().map(|x| s.strength * x).collect()))
        });
        // Layers below the injection point are not needed for the backward pass.
        let first_cached = steer.map(|s| s.layer).unwrap_or(self.cfg.n_layers);

        let mut x = self.embed_tokens(seq);
        let mut caches = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let inject = match &shift {
                Some((l, loc, add)) if *l == li => Some((*loc, add.as_slice())),
                _ => None,
            };
            let cache = keep_trace && li >= first_cached;
            let (out, c) = self.block_forward(layer, x, t_len, inject, cache);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(TsvError::NonFinite(format!(
                    "activation after layer {li} (lambda {:e}, layer {})",
                    steer.map(|s| s.strength).unwrap_or(0.0),
                    steer.map(|s| s.layer).unwrap_or(0)
                )));
            }
            if let Some(c) = c {
                caches.push(c);
            }
            x = out;
        }

        let last = x[(t_len - 1) * d..t_len * d].to_vec();
        let (normed, inv_rms) = rms_normalize(&last, self.cfg.rmsnorm_eps);
        let u: Vec<f64> = normed.iter().zip(&self.final_gain).map(|(n, g)| n * g).collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(TsvError::NonFinite("final embedding".into()));
        }
        let trace = keep_trace.then(|| TraceParts {
            injection: steer.map(|s| Injection {
                layer: s.layer,
                location: s.location,
                strength: s.strength,
            }),
            seq_len: t_len,
            blocks: caches,
            final_normed: normed,
            final_inv_rms: inv_rms,
        });
        Ok((u, trace))
    }

    fn block_forward(
        &self,
        w: &LayerWeights,
        mut x: Vec<f64>,
        t_len: usize,
        inject: Option<(Location, &[f64])>,
        keep: bool,
    ) -> (Vec<f64>, Option<BlockCache>) {
        let d = self.cfg.d_model;
        let hd = self.cfg.d_hidden();
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let eps = self.cfg.rmsnorm_eps;

        if let Some((Location::Residual, add)) = inject {
            add_rows(&mut x, add);
        }

        // attention sublayer
        let mut a_norm = vec![0.0; t_len * d];
        let mut inv1 = vec![0.0; t_len];
        let mut a = vec![0.0; t_len * d];
        for t in 0..t_len {
            let (n, s) = rms_normalize(&x[t * d..(t + 1) * d], eps);
            inv1[t] = s;
            for i in 0..d {
                a[t * d + i] = n[i] * w.attn_gain[i];
            }
            a_norm[t * d..(t + 1) * d].copy_from_slice(&n);
        }
        let q = matmul(&a, &w.wq, t_len, d, d);
        let k = matmul(&a, &w.wk, t_len, d, d);
        let v = matmul(&a, &w.wv, t_len, d, d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..t_len {
                let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = scale * dot(qi, &k[j * d + off..j * d + off + dh]);
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut().take(i + 1) {
                    *r /= z;
                }
                for j in 0..=i {
                    let p = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        o[i * d + off + c] += p * vj[c];
                    }
                }
            }
        }
        let mut attn = matmul(&o, &w.wo, t_len, d, d);
        if let Some((Location::AttnOutput, add)) = inject {
            add_rows(&mut attn, add);
        }
        let y: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

        // MLP sublayer
        let mut b_norm = vec![0.0; t_len * d];
        let mut inv2 = vec![0.0; t_len];
        let mut b = vec![0.0; t_len * d];
        for t in 0..t_len {
            let (n, s) = rms_normalize(&y[t * d..(t + 1) * d], eps);
            inv2[t] = s;
            for i in 0..d {
                b[t * d + i] = n[i] * w.mlp_gain[i];
            }
            b_norm[t * d..(t + 1) * d].copy_from_slice(&n);
        }
        let hpre = matmul(&b, &w.w_up, t_len, d, hd);
        let z: Vec<f64> = hpre.iter().map(|&h| gelu(h)).collect();
        let mut m = matmul(&z, &w.w_down, t_len, hd, d);
        if let Some((Location::MlpOutput, add)) = inject {
            add_rows(&mut m, add);
        }
        let out: Vec<f64> = y.iter().zip(&m).map(|(a, b)| a + b).collect();

        let cache = keep.then(|| BlockCache {
            a_norm,
            inv1,
            q,
            k,
            v,
            probs,
            y_norm: b_norm,
            inv2,
            hpre,
        });
        (out, cache)
    }
}

// ---------------------------------------------------------------------------
// trace and backward

#[derive(Debug, Clone, Copy, PartialEq)]
struct Injection {
    layer: usize,
    location: Location,
    strength: f64,
}

#[derive(Debug, Clone)]
struct BlockCache {
    a_norm: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    y_norm: Vec<f64>,
    inv2: Vec<f64>,
    hpre: Vec<f64>,
}

#[derive(Debug)]
struct TraceParts {
    injection: Option<Injection>,
    seq_len: usize,
    blocks: Vec<BlockCache>,
    final_normed: Vec<f64>,
    final_inv_rms: f64,
}

/// Activations of one forward pass from the injection layer upward.
///
/// Consumed by [`vjp_steering`](Self::vjp_steering); a trace can be used for
/// exactly one backward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    weights: Arc<ModelWeights>,
    parts: TraceParts,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.parts.seq_len
    }

    /// Gradient of `grad_u . u` with respect to the steering vector.
    pub fn vjp_steering(self, grad_u: &[f64]) -> Result<Vec<f64>> {
        let w = &*self.weights;
        let tr = &self.parts;
        let cfg = &w.cfg;
        let d = cfg.d_model;
        if grad_u.len() != d {
            return Err(TsvError::DimensionMismatch {
                expected: d,
                got: grad_u.len(),
            });
        }
        if grad_u.iter().any(|g| !g.is_finite()) {
            return Err(TsvError::NonFinite("upstream gradient".into()));
        }
        let inj = match tr.injection {
            Some(inj) => inj,
            None => return Ok(vec![0.0; d]),
        };
        if inj.strength == 0.0 {
            return Ok(vec![0.0; d]);
        }

        let t_len = tr.seq_len;
        let dn: Vec<f64> = grad_u.iter().zip(&w.final_gain).map(|(g, s)| g * s).collect();
        let mut dx = vec![0.0; t_len * d];
        let last = rms_backward(&tr.final_normed, tr.final_inv_rms, &dn);
        dx[(t_len - 1) * d..].copy_from_slice(&last);

        let mut acc: Option<Vec<f64>> = None;
        for (offset, cache) in tr.blocks.iter().enumerate().rev() {
            let li = inj.layer + offset;
            let loc = (li == inj.layer).then_some(inj.location);
            let (dx_in, grad) = w.block_backward(&w.layers[li], cache, &dx, t_len, loc);
            if grad.is_some() {
                acc = grad;
            }
            dx = dx_in;
        }
        let sum = acc.expect("injection layer is cached");
        Ok(sum.into_iter().map(|g| inj.strength * g).collect())
    }
}

impl ModelWeights {
    /// Backward through one block. When `loc` is set, also returns the
    /// position-summed gradient at that injection point.
    fn block_backward(
        &self,
        w: &LayerWeights,
        c: &BlockCache,
        dx_out: &[f64],
        t_len: usize,
        loc: Option<Location>,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let d = self.cfg.d_model;
        let hd = self.cfg.d_hidden();
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let mut grad = None;

        if loc == Some(Location::MlpOutput) {
            grad = Some(sum_rows(dx_out, d));
        }

        // MLP branch
        let dz = matmul_bt(dx_out, &w.w_down, t_len, d, hd);
        let dh_pre: Vec<f64> = dz.iter().zip(&c.hpre).map(|(g, &h)| g * gelu_grad(h)).collect();
        let db = matmul_bt(&dh_pre, &w.w_up, t_len, hd, d);
        let mut dy = dx_out.to_vec();
        for t in 0..t_len {
            let dn: Vec<f64> = (0..d).map(|i| db[t * d + i] * w.mlp_gain[i]).collect();
            let g = rms_backward(&c.y_norm[t * d..(t + 1) * d], c.inv2[t], &dn);
            for i in 0..d {
                dy[t * d + i] += g[i];
            }
        }

        if loc == Some(Location::AttnOutput) {
            grad = Some(sum_rows(&dy, d));
        }

        // attention branch
        let d_o = matmul_bt(&dy, &w.wo, t_len, d, d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..t_len {
                let p = &c.probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                let doi = &d_o[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(doi, &c.v[j * d + off..j * d + off + dh]);
                    weighted += p[j] * dp[j];
                    for e in 0..dh {
                        dv[j * d + off + e] += p[j] * doi[e];
                    }
                }
                for j in 0..=i {
                    let ds = scale * p[j] * (dp[j] - weighted);
                    for e in 0..dh {
                        dq[i * d + off + e] += ds * c.k[j * d + off + e];
                        dk[j * d + off + e] += ds * c.q[i * d + off + e];
                    }
                }
            }
        }
        let mut da = matmul_bt(&dq, &w.wq, t_len, d, d);
        for (acc, m) in [(&dk, &w.wk), (&dv, &w.wv)] {
            let part = matmul_bt(acc, m, t_len, d, d);
            for (a, p) in da.iter_mut().zip(part) {
                *a += p;
            }
        }
        let mut dx = dy;
        for t in 0..t_len {
            let dn: Vec<f64> = (0..d).map(|i| da[t * d + i] * w.attn_gain[i]).collect();
            let g = rms_backward(&c.a_norm[t * d..(t + 1) * d], c.inv1[t], &dn);
            for i in 0..d {
                dx[t * d + i] += g[i];
            }
        }

        if loc == Some(Location::Residual) {
            grad = Some(sum_rows(&dx, d));
        }
        (dx, grad)
    }
}

// ---------------------------------------------------------------------------
// small dense helpers

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x (rows x n_in) * w (n_in x n_out)`.
fn matmul(x: &[f64], w: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let or = &mut out[r * n_out..(r + 1) * n_out];
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * n_out..(i + 1) * n_out];
            for (o, &wij) in or.iter_mut().zip(wi) {
                *o += xi * wij;
            }
        }
    }
    out
}

/// `g (rows x n_out) * w^T` where `w` is `n_in x n_out`.
fn matmul_bt(g: &[f64], w: &[f64], rows: usize, n_out: usize, n_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_in];
    for r in 0..rows {
        let gr = &g[r * n_out..(r + 1) * n_out];
        for i in 0..n_in {
            out[r * n_in + i] = dot(gr, &w[i * n_out..(i + 1) * n_out]);
        }
    }
    out
}

fn add_rows(x: &mut [f64], add: &[f64]) {
    for row in x.chunks_exact_mut(add.len()) {
        for (a, b) in row.iter_mut().zip(add) {
            *a += b;
        }
    }
}

fn sum_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn rms_normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    (x.iter().map(|v| v * inv).collect(), inv)
}

/// Input gradient of `n = x * inv_rms(x)` given `dn`.
fn rms_backward(normed: &[f64], inv: f64, dn: &[f64]) -> Vec<f64> {
    let mean = dot(dn, normed) / normed.len() as f64;
    dn.iter()
        .zip(normed)
        .map(|(g, n)| inv * (g - n * mean))
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
