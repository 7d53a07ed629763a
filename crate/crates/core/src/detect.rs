//! Scoring, thresholded detection, AUROC and evaluation reports.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{embed_in_batches, BatchItem, EmbeddingBackend};
use crate::data::{Class, Dataset};
use crate::error::{Result, TsvError};
use crate::model::SteeringSpec;
use crate::train::{Checkpoint, TrainConfig};
use crate::vmf::{class_posterior, l2_norm, normalize_embedding, Prototypes};

pub const HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_ZETA: f64 = 0.5;

/// Truthful-class posterior of an unnormalized embedding.
pub fn truthfulness_score(p: &Prototypes, u: &[f64]) -> Result<f64> {
    let r = normalize_embedding(u)?;
    Ok(class_posterior(p, &r)?[Class::Truthful.index()])
}

/// 1 (truthful) iff `s >= zeta`, else 0.
pub fn detect(s: f64, zeta: f64) -> u8 {
    u8::from(s >= zeta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<Class>,
}

/// Scores every record with the checkpoint's steering, or with the strength
/// replaced by `strength` when given.
pub fn score_dataset(
    ckpt: &Checkpoint,
    backend: &mut dyn EmbeddingBackend,
    data: &Dataset,
    strength: Option<f64>,
) -> Result<Vec<ScoreRecord>> {
    ckpt.check_backend(backend)?;
    let protos = ckpt.prototypes()?;
    let mut steer = ckpt.steering();
    if let Some(s) = strength {
        steer = steer.with_strength(s);
    }
    let items = batch_items(data);
    let embs = embed_in_batches(backend, Some(&steer), &items, ckpt.config.batch_size)?;
    embs.iter()
        .zip(data.records())
        .map(|((id, u), rec)| {
            Ok(ScoreRecord {
                id: id.clone(),
                score: truthfulness_score(&protos, u)?,
                label: rec.truth(),
            })
        })
        .collect()
}

fn batch_items(data: &Dataset) -> Vec<BatchItem<'_>> {
    data.records()
        .iter()
        .map(|r| BatchItem {
            id: &r.id,
            sequence: &r.sequence,
        })
        .collect()
}

/// Mann-Whitney AUROC with truthful as the positive class; ties count 1/2.
pub fn auroc(scores: &[(f64, Class)]) -> Result<f64> {
    let n_t = scores.iter().filter(|(_, c)| *c == Class::Truthful).count();
    let n_h = scores.len() - n_t;
    if n_t == 0 || n_h == 0 {
        return Err(TsvError::SingleClass);
    }
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(TsvError::NonFinite(format!("score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // twice the rank sum keeps average ranks integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if scores[k].1 == Class::Truthful {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_t * (n_t + 1)) as u64;
    Ok(u2 as f64 / (2 * n_t * n_h) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn from_norms(norms: &[f64]) -> Result<Self> {
        if norms.is_empty() {
            return Err(TsvError::Empty("norm sample"));
        }
        let n = norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Ok(Self {
            count: norms.len(),
            mean,
            stddev: var.sqrt(),
            min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// `||u||` statistics over a dataset, with or without steering.
pub fn norm_stats(
    backend: &mut dyn EmbeddingBackend,
    steer: Option<&SteeringSpec>,
    data: &Dataset,
    batch_size: usize,
) -> Result<NormStats> {
    let embs = embed_in_batches(backend, steer, &batch_items(data), batch_size)?;
    let norms: Vec<f64> = embs.iter().map(|(_, u)| l2_norm(u)).collect();
    NormStats::from_norms(&norms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub unsteered: NormStats,
    pub steered: NormStats,
}

pub fn norm_report(
    backend: &mut dyn EmbeddingBackend,
    ckpt: &Checkpoint,
    data: &Dataset,
) -> Result<NormReport> {
    ckpt.check_backend(backend)?;
    let bs = ckpt.config.batch_size;
    Ok(NormReport {
        unsteered: norm_stats(backend, None, data, bs)?,
        steered: norm_stats(backend, Some(&ckpt.steering()), data, bs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub n_truthful: usize,
    pub n_hallucinated: usize,
    /// Score counts over 20 equal bins of `[0, 1]`.
    pub histogram: Vec<usize>,
    pub norms: NormReport,
    pub config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<String>,
}

pub fn histogram(scores: &[f64]) -> Vec<usize> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for &s in scores {
        let b = ((s * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

/// Labels of a scored test set; every record must carry one.
fn labeled_scores(records: &[ScoreRecord]) -> Result<Vec<(f64, Class)>> {
    records
        .iter()
        .map(|r| {
            r.label
                .map(|c| (r.score, c))
                .ok_or_else(|| TsvError::MissingLabels(format!("test record {} has no label", r.id)))
        })
        .collect()
}

/// Full report on a labeled test set. When `training_ids` is given, any
/// overlap with the test ids is an error.
pub fn evaluate(
    ckpt: &Checkpoint,
    backend: &mut dyn EmbeddingBackend,
    test: &Dataset,
    training_ids: Option<&HashSet<String>>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(TsvError::Empty("test set"));
    }
    if let Some(train_ids) = training_ids {
        if let Some(r) = test.records().iter().find(|r| train_ids.contains(&r.id)) {
            return Err(TsvError::Leakage(r.id.clone()));
        }
    }
    let records = score_dataset(ckpt, backend, test, None)?;
    let labeled = labeled_scores(&records)?;
    let auroc = auroc(&labeled)?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    Ok(EvalReport {
        auroc,
        n_truthful: labeled.iter().filter(|(_, c)| *c == Class::Truthful).count(),
        n_hallucinated: labeled.iter().filter(|(_, c)| *c == Class::Hallucinated).count(),
        histogram: histogram(&scores),
        norms: norm_report(backend, ckpt, test)?,
        config: ckpt.config.clone(),
        source: None,
        target: None,
    })
}

/// [`evaluate`] on a dataset other than the one the checkpoint was trained on.
pub fn transfer_evaluate(
    ckpt: &Checkpoint,
    backend: &mut dyn EmbeddingBackend,
    test: &Dataset,
    source: &str,
    target: &str,
) -> Result<EvalReport> {
    let mut report = evaluate(ckpt, backend, test, None)?;
    report.source = Some(source.to_string());
    report.target = Some(target.to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::InProcessBackend;
    use crate::data::{split_exemplar_unlabeled, synth_generate, SynthConfig};
    use crate::model::ModelConfig;
    use crate::train::train;
    use proptest::prelude::*;

    fn pair_oracle(scores: &[(f64, Class)]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (st, ct) in scores {
            for (sh, ch) in scores {
                if *ct == Class::Truthful && *ch == Class::Hallucinated {
                    den += 1.0;
                    if st > sh {
                        num += 1.0;
                    } else if st == sh {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    use Class::{Hallucinated as H, Truthful as T};

    #[test]
    fn auroc_examples() {
        let sep = [(0.9, T), (0.8, T), (0.2, H), (0.1, H)];
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        let mixed = [(0.9, T), (0.8, T), (0.4, T), (0.7, H), (0.3, H)];
        assert!((auroc(&mixed).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(auroc(&mixed).unwrap(), pair_oracle(&mixed));
        let ties = [(0.5, T), (0.5, H), (0.5, T), (0.5, H)];
        assert_eq!(auroc(&ties).unwrap(), 0.5);
        assert!(matches!(auroc(&[(0.1, T), (0.2, T)]), Err(TsvError::SingleClass)));
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(raw in prop::collection::vec((0u8..12, any::<bool>()), 2..120)) {
            let s: Vec<(f64, Class)> = raw.iter().map(|&(v, t)| (v as f64 / 11.0, if t { T } else { H })).collect();
            prop_assume!(s.iter().any(|x| x.1 == T) && s.iter().any(|x| x.1 == H));
            prop_assert_eq!(auroc(&s).unwrap(), pair_oracle(&s));
        }

        #[test]
        fn auroc_is_invariant_under_monotone_maps(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)) {
            let s: Vec<(f64, Class)> = raw.iter().map(|&(v, t)| (v, if t { T } else { H })).collect();
            prop_assume!(s.iter().any(|x| x.1 == T) && s.iter().any(|x| x.1 == H));
            let mapped: Vec<(f64, Class)> = s.iter().map(|&(v, c)| ((3.0 * v).exp() - 7.0, c)).collect();
            prop_assert_eq!(auroc(&s).unwrap(), auroc(&mapped).unwrap());
        }

        #[test]
        fn detect_is_monotone(s in 0.0f64..1.0, z1 in 0.0f64..1.0, z2 in 0.0f64..1.0) {
            let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
            prop_assert!(detect(s, hi) <= detect(s, lo));
        }
    }

    #[test]
    fn detect_examples() {
        assert_eq!(detect(0.7, 0.5), 1);
        assert_eq!(detect(0.5, 0.5), 1);
        assert_eq!(detect(0.3, 0.5), 0);
    }

    #[test]
    fn score_examples() {
        let p = Prototypes::new(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], 10.0).unwrap();
        let s = truthfulness_score(&p, &[2.0, 0.0, 0.0]).unwrap();
        assert!((s - 0.999_954_602_131_297_6).abs() < 1e-12);
        assert_eq!(truthfulness_score(&p, &[1.0, 1.0, 0.3]).unwrap(), 0.5);
        let flat = Prototypes::new(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(truthfulness_score(&flat, &[0.3, -2.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn histogram_and_norms() {
        let h = histogram(&[0.0, 0.04, 0.05, 0.5, 0.99, 1.0]);
        assert_eq!(h.iter().sum::<usize>(), 6);
        assert_eq!((h[0], h[1], h[10], h[19]), (2, 1, 1, 2));
        let one = NormStats::from_norms(&[3.5]).unwrap();
        assert_eq!((one.mean, one.min, one.max, one.stddev), (3.5, 3.5, 3.5, 0.0));
    }

    #[test]
    fn unit_gain_norms_are_constant() {
        // the final RMSNorm with unit gains puts every embedding at norm sqrt(d / (1 + eps/ms)),
        // which is sqrt(d) to within 1e-6 once eps is negligible
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 16,
            max_seq_len: 8,
            rmsnorm_eps: 1e-12,
            embedding_std: 1.0,
            seed: 5,
        };
        let data = synth_generate(
            &SynthConfig {
                vocab_size: 16,
                seq_len: 8,
                prompt_len: 4,
                ..Default::default()
            },
            20,
        )
        .unwrap();
        let mut b = InProcessBackend::new(&cfg).unwrap();
        let st = norm_stats(&mut b, None, &data, 7).unwrap();
        assert!((st.max - st.min) <= 1e-6);
        assert!((st.mean - 8f64.sqrt()).abs() <= 1e-5);
    }

    #[test]
    fn evaluate_report_and_guards() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 16,
            max_seq_len: 8,
            rmsnorm_eps: 1e-6,
            embedding_std: 1.0,
            seed: 5,
        };
        let sc = SynthConfig {
            vocab_size: 16,
            seq_len: 8,
            prompt_len: 4,
            pi: 0.5,
            ..Default::default()
        };
        let data = synth_generate(&sc, 60).unwrap();
        let (ex, rest) = split_exemplar_unlabeled(&data, 20, 2).unwrap();
        let (u, h) = rest.unlabeled_view();
        let mut b = InProcessBackend::new(&cfg).unwrap();
        let tc = TrainConfig {
            n_initial_epochs: 2,
            n_augmented_epochs: 1,
            layer: 0,
            k_select: 8,
            ..Default::default()
        };
        let ck = train(&tc, &mut b, &ex, &u, Some(&h)).unwrap().checkpoint;
        let rep = evaluate(&ck, &mut b, &rest, Some(&ex.ids())).unwrap();
        assert_eq!(rep.n_truthful + rep.n_hallucinated, 40);
        assert_eq!(rep.histogram.iter().sum::<usize>(), 40);
        assert!((0.0..=1.0).contains(&rep.auroc));
        assert!(rep.source.is_none());
        assert!(matches!(
            evaluate(&ck, &mut b, &ex, Some(&ex.ids())),
            Err(TsvError::Leakage(_))
        ));
        let tr = transfer_evaluate(&ck, &mut b, &rest, "a.jsonl", "b.jsonl").unwrap();
        assert_eq!(tr.auroc, rep.auroc);
        assert_eq!(tr.source.as_deref(), Some("a.jsonl"));

        // zero strength at scoring time is exactly the unsteered model
        let zero = score_dataset(&ck, &mut b, &rest, Some(0.0)).unwrap();
        let p = ck.prototypes().unwrap();
        for (rec, r) in zero.iter().zip(rest.records()) {
            let u = b.weights().embed_last_token(&r.sequence, None).unwrap();
            assert_eq!(rec.score.to_bits(), truthfulness_score(&p, &u).unwrap().to_bits());
        }
    }
}
