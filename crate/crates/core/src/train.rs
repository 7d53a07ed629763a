//! The two-phase training loop, checkpoints and the training log.
//!
//! Phase 1 fits the steering vector and the prototypes on the labeled
//! exemplars. One pseudo-labeling round then assigns soft labels to the
//! unlabeled pool by optimal transport, keeps the `K` most confident and adds
//! them to the training set. Phase 2 continues on the augmented set.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{embed_in_batches, BackendDescriptor, BatchItem, EmbeddingBackend};
use crate::curate::{
    augment_exemplars, pseudo_label_accuracy, select_topk, uncertainty_scores, SelectionResult,
    TrainingItem, TrainingSet, UncertaintyRecord,
};
use crate::data::{class_distribution_from_exemplars, Class, ClassDistribution, Dataset, HiddenLabels, UnlabeledSet};
use crate::error::{Result, TsvError};
use crate::io::{write_atomic, write_atomic_str};
use crate::model::{Location, SteeringSpec};
use crate::optim::{adamw_step, AdamState, AdamWParams};
use crate::ot::{build_joint_posterior, plan_to_soft_labels, sinkhorn, SinkhornParams};
use crate::vmf::{class_posterior, ema_update, loss_grad_wrt_u, nll_loss, normalize_embedding, Prototypes, TargetDistribution};

pub const CHECKPOINT_FORMAT: &str = "tsvlab-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the class distribution `w` for the transport constraint comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// Class frequencies of the labeled exemplars.
    Exemplar,
    /// `(0.5, 0.5)`.
    Uniform,
    /// True class frequencies of the unlabeled pool (diagnostic only).
    Oracle,
}

impl WMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WMode::Exemplar => "exemplar",
            WMode::Uniform => "uniform",
            WMode::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for WMode {
    type Err = TsvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exemplar" => Ok(WMode::Exemplar),
            "uniform" => Ok(WMode::Uniform),
            "oracle" => Ok(WMode::Oracle),
            other => Err(TsvError::Config(format!(
                "unknown w mode {other:?} (expected exemplar, uniform or oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub kappa: f64,
    pub ema_decay: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub n_initial_epochs: usize,
    pub n_augmented_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub k_select: usize,
    /// Size of the labeled exemplar split; recorded here so the checkpoint
    /// echoes how the data was divided.
    pub n_exemplars: usize,
    pub layer: usize,
    pub location: Location,
    pub seed: u64,
    pub w_mode: WMode,
    /// Component scale of the Gaussian initialization of `v`.
    pub v_init_scale: f64,
    /// Keep `v = 0` and skip its updates; only the prototypes are fit.
    pub freeze_v: bool,
    /// Use one-hot pseudo-labels instead of the transport soft labels.
    pub hard_pseudo_labels: bool,
    /// Re-embed each batch with the updated `v` before the prototype update.
    pub ema_recompute: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            kappa: 10.0,
            ema_decay: 0.99,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            n_initial_epochs: 20,
            n_augmented_epochs: 20,
            batch_size: 128,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            k_select: 128,
            n_exemplars: 32,
            layer: 0,
            location: Location::Residual,
            seed: 7,
            w_mode: WMode::Exemplar,
            v_init_scale: 0.01,
            freeze_v: false,
            hard_pseudo_labels: false,
            ema_recompute: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(TsvError::Config(m));
        if self.layer >= n_layers {
            return bad(format!(
                "layer {} out of range: valid layers are 0..={} for this {}-layer model",
                self.layer,
                n_layers.saturating_sub(1),
                n_layers
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be finite and >= 0, got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.k_select == 0 {
            return bad("k_select must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.v_init_scale >= 0.0) || !self.v_init_scale.is_finite() {
            return bad(format!("v_init_scale must be finite and >= 0, got {}", self.v_init_scale));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            epsilon: self.epsilon,
            n_iter: self.sinkhorn_iters,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    Augmented,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pl_acc: Option<f64>,
}

pub fn write_train_log<W: Write>(log: &[EpochRecord], mut w: W) -> Result<()> {
    for rec in log {
        let line = serde_json::to_string(rec).map_err(|e| TsvError::Corrupt(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_train_log(log: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_train_log(log, w))
}

pub fn load_train_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TsvError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A trained steering vector with its prototypes, config and backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub v: Vec<f64>,
    pub mu_truthful: Vec<f64>,
    pub mu_hallucinated: Vec<f64>,
    pub backend: BackendDescriptor,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, v: Vec<f64>, protos: &Prototypes, backend: BackendDescriptor) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            v,
            mu_truthful: protos.mu_truthful.clone(),
            mu_hallucinated: protos.mu_hallucinated.clone(),
            backend,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn steering(&self) -> SteeringSpec {
        SteeringSpec::new(self.v.clone(), self.config.layer, self.config.lambda, self.config.location)
    }

    pub fn prototypes(&self) -> Result<Prototypes> {
        Prototypes::from_unit(self.mu_truthful.clone(), self.mu_hallucinated.clone(), self.config.kappa)
    }

    /// Rejects a backend whose width or depth cannot host this checkpoint.
    pub fn check_backend(&self, backend: &dyn EmbeddingBackend) -> Result<()> {
        if backend.dim() != self.dim() {
            return Err(TsvError::DimensionMismatch {
                expected: self.dim(),
                got: backend.dim(),
            });
        }
        if self.config.layer >= backend.n_layers() {
            return Err(TsvError::Config(format!(
                "checkpoint steers layer {} but the backend has {} layers",
                self.config.layer,
                backend.n_layers()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| TsvError::Corrupt(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(s).map_err(|e| TsvError::Corrupt(e.to_string()))?;
        if raw.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(TsvError::Corrupt("not a tsvlab checkpoint".into()));
        }
        let version = raw
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| TsvError::Corrupt("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(TsvError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(raw).map_err(|e| TsvError::Corrupt(e.to_string()))?;
        if ckpt.v.is_empty() || ckpt.mu_truthful.len() != ckpt.dim() || ckpt.mu_hallucinated.len() != ckpt.dim() {
            return Err(TsvError::Corrupt("inconsistent vector dimensions".into()));
        }
        ckpt.prototypes()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        write_atomic_str(path.as_ref(), &s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// `v` and prototypes as they stood at the end of phase 1.
    pub phase1_v: Vec<f64>,
    pub phase1_prototypes: Prototypes,
    /// Uncertainty of every unlabeled example, in pool order; empty when the
    /// pool was empty.
    pub uncertainty: Vec<UncertaintyRecord>,
    pub selection: SelectionResult,
    pub pl_acc: Option<f64>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    backend: &'a mut dyn EmbeddingBackend,
    v: Vec<f64>,
    protos: Prototypes,
    opt: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn steer(&self) -> SteeringSpec {
        SteeringSpec::new(self.v.clone(), self.cfg.layer, self.cfg.lambda, self.cfg.location)
    }

    fn non_finite(&self, what: &str) -> TsvError {
        TsvError::NonFinite(format!(
            "{what} (lambda {:e}, layer {}); try a smaller steering strength",
            self.cfg.lambda, self.cfg.layer
        ))
    }

    /// Loss, gradient step on `v`, then the prototype update. Returns the batch loss.
    fn step(&mut self, batch: &[&TrainingItem]) -> Result<f64> {
        let items: Vec<BatchItem<'_>> = batch
            .iter()
            .map(|it| BatchItem {
                id: &it.id,
                sequence: &it.sequence,
            })
            .collect();
        let steer = self.steer();
        let (token, embeddings) = if self.cfg.freeze_v {
            (None, self.backend.embed(Some(&steer), &items)?)
        } else {
            let eb = self.backend.forward_batch(&steer, &items)?;
            (Some(eb.token), eb.embeddings)
        };
        let mut pairs: Vec<(Vec<f64>, TargetDistribution)> = Vec::with_capacity(batch.len());
        for ((_, u), it) in embeddings.iter().zip(batch) {
            if u.iter().any(|x| !x.is_finite()) {
                return Err(self.non_finite(&format!("embedding of {}", it.id)));
            }
            pairs.push((normalize_embedding(u)?, it.target));
        }
        let loss = nll_loss(&self.protos, &pairs)?;
        if !loss.is_finite() {
            return Err(self.non_finite("training loss"));
        }

        if let Some(token) = token {
            let scale = 1.0 / batch.len() as f64;
            let grads = embeddings
                .iter()
                .zip(batch)
                .map(|((id, u), it)| {
                    let g = loss_grad_wrt_u(&self.protos, u, &it.target)?;
                    Ok((id.clone(), g.into_iter().map(|x| x * scale).collect()))
                })
                .collect::<Result<Vec<(String, Vec<f64>)>>>()?;
            let grad_v = self.backend.vjp_batch(token, &grads)?;
            if grad_v.iter().any(|x| !x.is_finite()) {
                return Err(self.non_finite("steering gradient"));
            }
            adamw_step(&mut self.v, &mut self.opt, &grad_v, &self.cfg.adamw())?;
            if self.v.iter().any(|x| !x.is_finite()) {
                return Err(self.non_finite("steering vector"));
            }
        }

        if self.cfg.ema_recompute && !self.cfg.freeze_v {
            let fresh = self.backend.embed(Some(&self.steer()), &items)?;
            for ((r, _), (_, u)) in pairs.iter_mut().zip(&fresh) {
                *r = normalize_embedding(u)?;
            }
        }
        for c in Class::ALL {
            self.protos = ema_update(&self.protos, c, &pairs, self.cfg.ema_decay)?;
        }
        Ok(loss)
    }

    fn epoch(&mut self, set: &TrainingSet) -> Result<f64> {
        let mut order: Vec<&TrainingItem> = set.items().iter().collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            total += self.step(chunk)? * chunk.len() as f64;
        }
        Ok(total / order.len() as f64)
    }

    fn run_phase(&mut self, set: &TrainingSet, epochs: usize, phase: Phase, pl_acc: Option<f64>, log: &mut Vec<EpochRecord>) -> Result<()> {
        for e in 1..=epochs {
            let mean_loss = self.epoch(set)?;
            info!("{phase:?} epoch {e}/{epochs}: loss {mean_loss:.6}");
            log.push(EpochRecord {
                epoch: e,
                phase,
                mean_loss,
                pl_acc,
            });
        }
        Ok(())
    }

    /// Soft labels for the pool by optimal transport, scored against the
    /// current posteriors.
    fn pseudo_label(&mut self, pool: &UnlabeledSet, w: &ClassDistribution) -> Result<Vec<UncertaintyRecord>> {
        let items: Vec<BatchItem<'_>> = pool
            .items()
            .iter()
            .map(|it| BatchItem {
                id: &it.id,
                sequence: &it.sequence,
            })
            .collect();
        let steer = self.steer();
        let embeddings = embed_in_batches(&mut *self.backend, Some(&steer), &items, self.cfg.batch_size)?;
        let mut posteriors = Vec::with_capacity(embeddings.len());
        for (id, u) in &embeddings {
            let r = normalize_embedding(u)?;
            posteriors.push((id.clone(), class_posterior(&self.protos, &r)?));
        }
        let rows: Vec<[f64; 2]> = posteriors.iter().map(|(_, p)| *p).collect();
        let joint = build_joint_posterior(&rows, self.cfg.sinkhorn().p_floor)?;
        let plan = sinkhorn(&joint, w, &self.cfg.sinkhorn())?;
        let qs: Vec<(String, TargetDistribution)> = plan_to_soft_labels(&plan)?
            .into_iter()
            .zip(&posteriors)
            .map(|(q, (id, _))| (id.clone(), q))
            .collect();
        uncertainty_scores(&qs, &posteriors)
    }
}

fn transport_marginal(
    mode: WMode,
    exemplars: &Dataset,
    hidden: Option<&HiddenLabels>,
) -> Result<ClassDistribution> {
    match mode {
        WMode::Exemplar => class_distribution_from_exemplars(exemplars),
        WMode::Uniform => Ok(ClassDistribution::uniform()),
        WMode::Oracle => hidden
            .ok_or_else(|| TsvError::MissingLabels("oracle w mode needs the pool's hidden labels".into()))?
            .class_distribution(),
    }
}

/// Runs both phases. `hidden` is consulted only for pseudo-label accuracy
/// and for the oracle transport marginal.
pub fn train(
    cfg: &TrainConfig,
    backend: &mut dyn EmbeddingBackend,
    exemplars: &Dataset,
    pool: &UnlabeledSet,
    hidden: Option<&HiddenLabels>,
) -> Result<TrainOutcome> {
    cfg.validate(backend.n_layers())?;
    if exemplars.is_empty() {
        return Err(TsvError::Empty("exemplar set"));
    }
    let w = transport_marginal(cfg.w_mode, exemplars, hidden)?;
    let base = TrainingSet::from_exemplars(exemplars)?;
    let dim = backend.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v: Vec<f64> = (0..dim)
        .map(|_| cfg.v_init_scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let v = if cfg.freeze_v { vec![0.0; dim] } else { v };
    let protos = Prototypes::random(dim, cfg.kappa, &mut rng)?;
    let mut t = Trainer {
        cfg,
        backend,
        v,
        protos,
        opt: AdamState::new(dim),
        rng,
    };
    let mut log = Vec::new();

    t.run_phase(&base, cfg.n_initial_epochs, Phase::Initial, None, &mut log)?;
    let phase1_v = t.v.clone();
    let phase1_prototypes = t.protos.clone();

    let (uncertainty, selection, pl_acc) = if pool.is_empty() {
        warn!("unlabeled pool is empty; skipping pseudo-labeling");
        (Vec::new(), SelectionResult::empty(), None)
    } else {
        let unc = t.pseudo_label(pool, &w)?;
        let sel = select_topk(&unc, cfg.k_select)?;
        let acc = match hidden {
            Some(h) => Some(pseudo_label_accuracy(&sel, h)?),
            None => None,
        };
        if let Some(a) = acc {
            info!("selected {} pseudo-labeled examples, accuracy {a:.4}", sel.k_effective());
        }
        (unc, sel, acc)
    };
    let augmented = augment_exemplars(&base, &selection, pool, cfg.hard_pseudo_labels)?;
    t.run_phase(&augmented, cfg.n_augmented_epochs, Phase::Augmented, pl_acc, &mut log)?;

    let descriptor = t.backend.descriptor();
    let checkpoint = Checkpoint::new(cfg.clone(), t.v.clone(), &t.protos, descriptor);
    Ok(TrainOutcome {
        checkpoint,
        log,
        phase1_v,
        phase1_prototypes,
        uncertainty,
        selection,
        pl_acc,
    })
}
