//! Pseudo-label assignment by entropic optimal transport.
//!
//! The model posteriors of `M` unlabeled examples form the joint matrix
//! `P[m][c] = p(c | r_m) / M`. Sinkhorn scaling finds
//! `Q = diag(row_scaling) * P^(1/eps) * diag(col_scaling)` whose rows sum to
//! `1/M` and whose columns sum to the class distribution `w`. Every step runs
//! in the log domain: with `eps = 0.05` the kernel is `P^20`, which underflows
//! f64 for ordinary probabilities.

use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::error::{Result, TsvError};
use crate::vmf::TargetDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub n_iter: usize,
    /// Lower bound applied to posteriors before taking logs.
    pub p_floor: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            n_iter: 3,
            p_floor: 1e-12,
        }
    }
}

/// `M x 2` joint posterior, rows summing to `1/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    rows: Vec<[f64; 2]>,
}

impl JointPosterior {
    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Result of Sinkhorn scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub q: Vec<[f64; 2]>,
    pub w: ClassDistribution,
    pub iterations: usize,
    pub epsilon: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.q.iter().map(|r| r[0] + r[1]).collect()
    }

    pub fn col_sums(&self) -> [f64; 2] {
        let mut s = [0.0; 2];
        for r in &self.q {
            s[0] += r[0];
            s[1] += r[1];
        }
        s
    }
}

/// `P[m][c] = max(p_c, floor) / M`.
pub fn build_joint_posterior(posteriors: &[[f64; 2]], p_floor: f64) -> Result<JointPosterior> {
    if posteriors.is_empty() {
        return Err(TsvError::Empty("posterior list"));
    }
    let m = posteriors.len() as f64;
    let mut rows = Vec::with_capacity(posteriors.len());
    for (i, p) in posteriors.iter().enumerate() {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) || ((p[0] + p[1]) - 1.0).abs() > 1e-9 {
            return Err(TsvError::Config(format!(
                "posterior {i} ({}, {}) is not a distribution",
                p[0], p[1]
            )));
        }
        rows.push([p[0].max(p_floor) / m, p[1].max(p_floor) / m]);
    }
    Ok(JointPosterior { rows })
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sinkhorn scaling with the column update last, so the class marginal is
/// met after every iteration.
pub fn sinkhorn(
    p: &JointPosterior,
    w: &ClassDistribution,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    if p.is_empty() {
        return Err(TsvError::Empty("joint posterior"));
    }
    if !(params.epsilon > 0.0) || !params.epsilon.is_finite() {
        return Err(TsvError::Config(format!("epsilon must be > 0, got {}", params.epsilon)));
    }
    if params.n_iter == 0 {
        return Err(TsvError::Config("n_iter must be >= 1".into()));
    }
    let w_arr = w.as_array();
    if w_arr.iter().any(|&x| !(x > 0.0)) {
        return Err(TsvError::Config("class distribution must be strictly positive".into()));
    }
    let m = p.len();
    let log_m = (m as f64).ln();
    let log_w = [w_arr[0].ln(), w_arr[1].ln()];
    let log_kernel: Vec<[f64; 2]> = p
        .rows
        .iter()
        .map(|r| [r[0].ln() / params.epsilon, r[1].ln() / params.epsilon])
        .collect();

    let mut log_col = [0.0f64; 2];
    let mut log_row = vec![0.0f64; m];
    for _ in 0..params.n_iter {
        for (lr, lk) in log_row.iter_mut().zip(&log_kernel) {
            *lr = -log_m - log_sum_exp2(lk[0] + log_col[0], lk[1] + log_col[1]);
        }
        for c in 0..2 {
            let lse = log_sum_exp(log_kernel.iter().zip(&log_row).map(|(lk, lr)| lk[c] + lr));
            log_col[c] = log_w[c] - lse;
        }
        if log_col.iter().chain(&log_row).any(|x| !x.is_finite()) {
            return Err(TsvError::NonFinite(format!(
                "Sinkhorn scaling (epsilon {})",
                params.epsilon
            )));
        }
    }
    let q: Vec<[f64; 2]> = log_kernel
        .iter()
        .zip(&log_row)
        .map(|(lk, lr)| [(lr + lk[0] + log_col[0]).exp(), (lr + lk[1] + log_col[1]).exp()])
        .collect();
    if q.iter().flatten().any(|x| !x.is_finite()) {
        return Err(TsvError::NonFinite("transport plan".into()));
    }
    Ok(TransportPlan {
        q,
        w: *w,
        iterations: params.n_iter,
        epsilon: params.epsilon,
    })
}

/// Per-example soft labels `q(c | r_m) = M * Q[m][c]`, renormalized per row.
pub fn plan_to_soft_labels(plan: &TransportPlan) -> Result<Vec<TargetDistribution>> {
    plan.q
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s = row[0] + row[1];
            if !(s >= 1e-300) {
                return Err(TsvError::NonFinite(format!(
                    "transport plan row {i} has no mass"
                )));
            }
            let t = row[0] / s;
            TargetDistribution::new(t, 1.0 - t)
        })
        .collect()
}
