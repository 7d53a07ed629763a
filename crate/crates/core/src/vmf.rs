//! Hyperspherical two-class head: von Mises-Fisher class posterior over
//! normalized embeddings, its cross-entropy loss and gradient, and the
//! exponential-moving-average prototype update.
//!
//! The vMF normalizing constant is shared by both classes and cancels in the
//! posterior, so it never appears here.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Result, TsvError};
use crate::model::dot;

const MIN_NORM: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-6;

/// Unit-norm class mean directions and the shared concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub mu_truthful: Vec<f64>,
    pub mu_hallucinated: Vec<f64>,
    pub kappa: f64,
}

impl Prototypes {
    pub fn new(mu_truthful: Vec<f64>, mu_hallucinated: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu_truthful.len() != mu_hallucinated.len() {
            return Err(TsvError::DimensionMismatch {
                expected: mu_truthful.len(),
                got: mu_hallucinated.len(),
            });
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(TsvError::Config(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        Ok(Self {
            mu_truthful: normalize_embedding(&mu_truthful)?,
            mu_hallucinated: normalize_embedding(&mu_hallucinated)?,
            kappa,
        })
    }

    /// Takes already-normalized directions as they are, so a reloaded
    /// checkpoint scores bit-identically.
    pub fn from_unit(mu_truthful: Vec<f64>, mu_hallucinated: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu_truthful.len() != mu_hallucinated.len() {
            return Err(TsvError::DimensionMismatch {
                expected: mu_truthful.len(),
                got: mu_hallucinated.len(),
            });
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(TsvError::Config(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        for mu in [&mu_truthful, &mu_hallucinated] {
            let n = l2_norm(mu);
            if !((n - 1.0).abs() <= 1e-9) {
                return Err(TsvError::NotUnit(n));
            }
        }
        Ok(Self {
            mu_truthful,
            mu_hallucinated,
            kappa,
        })
    }

    /// Independent Gaussian directions, normalized.
    pub fn random<R: Rng + ?Sized>(dim: usize, kappa: f64, rng: &mut R) -> Result<Self> {
        let mut draw = || -> Vec<f64> {
            (0..dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let t = draw();
        let h = draw();
        Self::new(t, h, kappa)
    }

    pub fn dim(&self) -> usize {
        self.mu_truthful.len()
    }

    pub fn mu(&self, c: Class) -> &[f64] {
        match c {
            Class::Truthful => &self.mu_truthful,
            Class::Hallucinated => &self.mu_hallucinated,
        }
    }

    fn mu_mut(&mut self, c: Class) -> &mut Vec<f64> {
        match c {
            Class::Truthful => &mut self.mu_truthful,
            Class::Hallucinated => &mut self.mu_hallucinated,
        }
    }
}

/// Per-example target over `(truthful, hallucinated)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution([f64; 2]);

impl TargetDistribution {
    pub fn new(truthful: f64, hallucinated: f64) -> Result<Self> {
        if truthful < 0.0 || hallucinated < 0.0 || ((truthful + hallucinated) - 1.0).abs() > 1e-9 {
            return Err(TsvError::Config(format!(
                "target ({truthful}, {hallucinated}) is not a distribution"
            )));
        }
        Ok(Self([truthful, hallucinated]))
    }

    pub fn one_hot(c: Class) -> Self {
        let mut q = [0.0; 2];
        q[c.index()] = 1.0;
        Self(q)
    }

    pub fn get(&self, c: Class) -> f64 {
        self.0[c.index()]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }

    /// Most likely class; `None` on an exact tie.
    pub fn argmax(&self) -> Option<Class> {
        let [t, h] = self.0;
        if t > h {
            Some(Class::Truthful)
        } else if h > t {
            Some(Class::Hallucinated)
        } else {
            None
        }
    }

    pub fn hardened(&self) -> Self {
        match self.argmax() {
            Some(c) => Self::one_hot(c),
            None => *self,
        }
    }
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// `u / ||u||`.
pub fn normalize_embedding(u: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(u);
    if !(n > MIN_NORM) {
        return Err(TsvError::DegenerateEmbedding(n));
    }
    Ok(u.iter().map(|x| x / n).collect())
}

/// Softmax of `kappa * mu_c . r` over the two classes, `[p_truthful, p_hallucinated]`.
pub fn class_posterior(p: &Prototypes, r: &[f64]) -> Result<[f64; 2]> {
    if r.len() != p.dim() {
        return Err(TsvError::DimensionMismatch {
            expected: p.dim(),
            got: r.len(),
        });
    }
    let n = l2_norm(r);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(TsvError::NotUnit(n));
    }
    Ok(posterior_unchecked(p, r))
}

fn posterior_unchecked(p: &Prototypes, r: &[f64]) -> [f64; 2] {
    let lt = p.kappa * dot(&p.mu_truthful, r);
    let lh = p.kappa * dot(&p.mu_hallucinated, r);
    let m = lt.max(lh);
    let et = (lt - m).exp();
    let eh = (lh - m).exp();
    let z = et + eh;
    [et / z, eh / z]
}

/// Cross-entropy `-sum_c q_c log p_c`.
pub fn cross_entropy(q: &TargetDistribution, p: &[f64; 2]) -> f64 {
    Class::ALL
        .iter()
        .map(|&c| {
            let qc = q.get(c);
            if qc == 0.0 {
                0.0
            } else {
                -qc * p[c.index()].ln()
            }
        })
        .sum()
}

/// Mean cross-entropy of the vMF posterior against the targets.
pub fn nll_loss(p: &Prototypes, batch: &[(Vec<f64>, TargetDistribution)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(TsvError::Empty("loss batch"));
    }
    let mut total = 0.0;
    for (r, q) in batch {
        total += cross_entropy(q, &class_posterior(p, r)?);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the per-example loss with respect to the unnormalized
/// embedding `u`, treating the prototypes as constants:
/// `(I - r r^T) / ||u|| * kappa * sum_c (p_c - q_c) mu_c`.
pub fn loss_grad_wrt_u(p: &Prototypes, u: &[f64], q: &TargetDistribution) -> Result<Vec<f64>> {
    let norm = l2_norm(u);
    let r = normalize_embedding(u)?;
    let post = posterior_unchecked(p, &r);
    let wt = p.kappa * (post[0] - q.get(Class::Truthful));
    let wh = p.kappa * (post[1] - q.get(Class::Hallucinated));
    let g: Vec<f64> = p
        .mu_truthful
        .iter()
        .zip(&p.mu_hallucinated)
        .map(|(a, b)| wt * a + wh * b)
        .collect();
    let rg = dot(&r, &g);
    Ok(g.iter().zip(&r).map(|(gi, ri)| (gi - ri * rg) / norm).collect())
}

/// `mu_c <- normalize(decay * mu_c + (1 - decay) * r_bar)` with `r_bar` the
/// target-weighted mean of the batch's normalized embeddings. A batch with
/// no mass on `c` leaves the prototype unchanged.
pub fn ema_update(
    p: &Prototypes,
    c: Class,
    batch: &[(Vec<f64>, TargetDistribution)],
    decay: f64,
) -> Result<Prototypes> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(TsvError::Config(format!("ema decay {decay} not in [0, 1]")));
    }
    let d = p.dim();
    let mass: f64 = batch.iter().map(|(_, q)| q.get(c)).sum();
    let mut out = p.clone();
    if !(mass > 0.0) {
        warn!("EMA update skipped: no target mass for class {c} in batch");
        return Ok(out);
    }
    let mut r_bar = vec![0.0; d];
    for (r, q) in batch {
        if r.len() != d {
            return Err(TsvError::DimensionMismatch { expected: d, got: r.len() });
        }
        let wgt = q.get(c) / mass;
        for (acc, x) in r_bar.iter_mut().zip(r) {
            *acc += wgt * x;
        }
    }
    if decay == 1.0 {
        // renormalizing a unit vector can still move the last bit
        return Ok(out);
    }
    let mixed: Vec<f64> = p
        .mu(c)
        .iter()
        .zip(&r_bar)
        .map(|(m, r)| decay * m + (1.0 - decay) * r)
        .collect();
    match normalize_embedding(&mixed) {
        Ok(mu) => *out.mu_mut(c) = mu,
        Err(_) => warn!("EMA update skipped: prototype for {c} would collapse to zero"),
    }
    Ok(out)
}
