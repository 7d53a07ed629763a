//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsvError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One in-place update of `param`. Same arithmetic order as PyTorch's
/// single-tensor AdamW.
pub fn adamw_step(param: &mut [f64], state: &mut AdamState, grad: &[f64], h: &AdamWParams) -> Result<()> {
    let d = param.len();
    for len in [grad.len(), state.m.len(), state.v.len()] {
        if len != d {
            return Err(TsvError::DimensionMismatch { expected: d, got: len });
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TsvError::NonFinite(format!("gradient component {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let step_size = h.lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for i in 0..d {
        param[i] *= 1.0 - h.lr * h.weight_decay;
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        let denom = state.v[i].sqrt() / bc2_sqrt + h.eps;
        param[i] -= step_size * state.m[i] / denom;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_null_step() {
        let mut v = vec![0.3, -1.2, 4.0];
        let before = v.clone();
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            adamw_step(&mut v, &mut st, &[0.0; 3], &AdamWParams::default()).unwrap();
        }
        assert_eq!(v, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let h = AdamWParams::default();
        let mut v = vec![0.0; 4];
        let g = [2.5, -0.01, 100.0, -7.0];
        adamw_step(&mut v, &mut AdamState::new(4), &g, &h).unwrap();
        for (x, gi) in v.iter().zip(g) {
            assert!((x + h.lr * gi.signum()).abs() < 1e-8 * h.lr.max(1.0), "{x} vs {gi}");
        }
    }

    /// Scalar restatement of the update, one coordinate at a time.
    fn reference(x0: f64, grads: impl Fn(f64) -> f64, steps: usize, h: &AdamWParams) -> f64 {
        let (mut x, mut m, mut s) = (x0, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = grads(x);
            x -= h.lr * h.weight_decay * x;
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            s = h.beta2 * s + (1.0 - h.beta2) * g * g;
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            let bc2 = 1.0 - h.beta2.powi(t as i32);
            x -= (h.lr / bc1) * m / (s.sqrt() / bc2.sqrt() + h.eps);
        }
        x
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        // f(x, y) = 1.5 x^2 + 0.25 y^2, separable, so each coordinate is a scalar problem
        let h = AdamWParams {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..10 {
            let g = [3.0 * p[0], 0.5 * p[1]];
            adamw_step(&mut p, &mut st, &g, &h).unwrap();
        }
        let rx = reference(1.0, |x| 3.0 * x, 10, &h);
        let ry = reference(-2.0, |y| 0.5 * y, 10, &h);
        assert!((p[0] - rx).abs() <= 1e-12);
        assert!((p[1] - ry).abs() <= 1e-12);
        assert_eq!(st.t, 10);
    }

    #[test]
    fn rejects_bad_input() {
        let h = AdamWParams::default();
        let mut v = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(matches!(
            adamw_step(&mut v, &mut st, &[1.0], &h),
            Err(TsvError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            adamw_step(&mut v, &mut st, &[f64::NAN, 0.0], &h),
            Err(TsvError::NonFinite(_))
        ));
        assert_eq!(st.t, 0);
    }
}
