//! Steers the toy transformer at each injection point and checks the
//! steering-vector VJP against central differences.

use std::sync::Arc;

use tsvlab::data::TokenSequence;
use tsvlab::model::{Location, ModelConfig, ModelWeights, SteeringSpec};

fn main() -> tsvlab::Result<()> {
    let cfg = ModelConfig::default();
    let w = Arc::new(ModelWeights::init(&cfg)?);
    let seq = TokenSequence::new(vec![3, 14, 15, 9, 26, 5, 35, 8], 4)?;
    let d = w.d_model();
    let v: Vec<f64> = (0..d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let g: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let base = w.embed_last_token(&seq, None)?;

    for loc in Location::ALL {
        for layer in 0..w.n_layers() {
            let spec = SteeringSpec::new(v.clone(), layer, 5.0, loc);
            let (u, trace) = w.forward_last_token(&seq, Some(&spec))?;
            let grad = trace.vjp_steering(&g)?;
            let f = |x: &[f64]| -> f64 {
                let s = SteeringSpec::new(x.to_vec(), layer, 5.0, loc);
                let u = w.embed_last_token(&seq, Some(&s)).unwrap();
                u.iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for k in 0..d {
                let (mut p, mut m) = (v.clone(), v.clone());
                p[k] += h;
                m[k] -= h;
                worst = worst.max((grad[k] - (f(&p) - f(&m)) / (2.0 * h)).abs());
            }
            let shift: f64 = u.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            println!(
                "{:<11} layer {layer}: |u - u0| = {shift:.4}, max |vjp - fd| = {worst:.2e}",
                loc.as_str()
            );
        }
    }
    Ok(())
}
