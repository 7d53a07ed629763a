//! Synthetic end-to-end runs: data splits, trained vs. unsteered baselines,
//! and one-knob ablation sweeps.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backend::{EmbeddingBackend, InProcessBackend};
use crate::curate::{pseudo_label_accuracy, select_topk};
use crate::data::{split_exemplar_unlabeled, split_holdout, synth_generate, Dataset, SynthConfig};
use crate::detect::evaluate;
use crate::error::{Result, TsvError};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig, TrainOutcome};

/// Everything that determines a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSetup {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_records: usize,
    /// Share of the non-exemplar records held out for testing; the rest
    /// form the unlabeled pool.
    pub test_fraction: f64,
}

impl Default for ExperimentSetup {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_records: 512,
            test_fraction: 0.5,
        }
    }
}

/// Exemplars (labeled), pool (labels hidden) and test (labels hidden).
#[derive(Debug, Clone)]
pub struct Splits {
    pub exemplars: Dataset,
    pub pool: Dataset,
    pub test: Dataset,
}

pub fn make_splits(setup: &ExperimentSetup) -> Result<Splits> {
    let data = synth_generate(&setup.synth, setup.n_records)?;
    split_dataset(&data, setup.train.n_exemplars, setup.test_fraction, setup.train.seed)
}

pub fn split_dataset(data: &Dataset, n_exemplars: usize, test_fraction: f64, seed: u64) -> Result<Splits> {
    let (exemplars, rest) = split_exemplar_unlabeled(data, n_exemplars, seed)?;
    let (pool, test) = split_holdout(&rest, test_fraction, seed)?;
    Ok(Splits { exemplars, pool, test })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test_auroc: f64,
    pub train_ids: HashSet<String>,
}

impl RunResult {
    /// Pseudo-label accuracy had the selection kept `k` examples.
    pub fn pl_acc_at(&self, k: usize, splits: &Splits) -> Result<f64> {
        let (_, hidden) = splits.pool.unlabeled_view();
        pseudo_label_accuracy(&select_topk(&self.outcome.uncertainty, k)?, &hidden)
    }
}

/// Trains on the splits and scores the held-out test set.
pub fn run_on(cfg: &TrainConfig, backend: &mut dyn EmbeddingBackend, splits: &Splits) -> Result<RunResult> {
    let (pool, hidden) = splits.pool.unlabeled_view();
    let outcome = train(cfg, backend, &splits.exemplars, &pool, Some(&hidden))?;
    let mut train_ids = splits.exemplars.ids();
    train_ids.extend(outcome.selection.ids().map(str::to_string));
    let report = evaluate(&outcome.checkpoint, backend, &splits.test, Some(&train_ids))?;
    Ok(RunResult {
        outcome,
        test_auroc: report.auroc,
        train_ids,
    })
}

/// The same pipeline with `v` held at zero, so only the prototypes are fit
/// on raw embeddings.
pub fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        freeze_v: true,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub trained_auroc: f64,
    pub baseline_auroc: f64,
    pub pl_acc: Option<f64>,
}

pub fn compare_with_baseline(setup: &ExperimentSetup) -> Result<Comparison> {
    let splits = make_splits(setup)?;
    let mut backend = InProcessBackend::new(&setup.model)?;
    let trained = run_on(&setup.train, &mut backend, &splits)?;
    let base = run_on(&baseline_config(&setup.train), &mut backend, &splits)?;
    Ok(Comparison {
        trained_auroc: trained.test_auroc,
        baseline_auroc: base.test_auroc,
        pl_acc: trained.outcome.pl_acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Layer,
    Strength,
    Exemplars,
    K,
}

impl std::str::FromStr for Sweep {
    type Err = TsvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Sweep::Layer),
            "strength" => Ok(Sweep::Strength),
            "exemplars" => Ok(Sweep::Exemplars),
            "k" => Ok(Sweep::K),
            other => Err(TsvError::Config(format!(
                "unknown sweep {other:?} (expected layer, strength, exemplars or k)"
            ))),
        }
    }
}

/// One sweep value. `auroc` is `None` when the exemplar draw for that value
/// lacks a class, which small exemplar sets hit at low `pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub auroc: Option<f64>,
    pub pl_acc: Option<f64>,
}

fn as_count(sweep: Sweep, x: f64) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
        Ok(x as usize)
    } else {
        Err(TsvError::Config(format!("{sweep:?} sweep needs non-negative integers, got {x}")))
    }
}

/// The setup with one knob set to `value`.
pub fn apply_sweep(setup: &ExperimentSetup, sweep: Sweep, value: f64) -> Result<ExperimentSetup> {
    let mut s = setup.clone();
    match sweep {
        Sweep::Layer => s.train.layer = as_count(sweep, value)?,
        Sweep::Strength => s.train.lambda = value,
        Sweep::Exemplars => s.train.n_exemplars = as_count(sweep, value)?,
        Sweep::K => s.train.k_select = as_count(sweep, value)?,
    }
    Ok(s)
}

/// Retrains from scratch for each value on the dataset, in order.
pub fn ablate(setup: &ExperimentSetup, data: &Dataset, sweep: Sweep, values: &[f64]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(TsvError::Empty("sweep values"));
    }
    let mut backend = InProcessBackend::new(&setup.model)?;
    values
        .iter()
        .map(|&value| {
            let s = apply_sweep(setup, sweep, value)?;
            let splits = split_dataset(data, s.train.n_exemplars, s.test_fraction, s.train.seed)?;
            match run_on(&s.train, &mut backend, &splits) {
                Ok(run) => Ok(AblationRow {
                    value,
                    auroc: Some(run.test_auroc),
                    pl_acc: run.outcome.pl_acc,
                }),
                Err(e @ TsvError::DegenerateClass(_)) => {
                    warn!("{sweep:?} = {value}: {e}; row left empty");
                    Ok(AblationRow {
                        value,
                        auroc: None,
                        pl_acc: None,
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// [`ablate`] with the values spread over `jobs` threads. Every run is
/// independent, so the rows match the sequential result.
pub fn ablate_jobs(
    setup: &ExperimentSetup,
    data: &Dataset,
    sweep: Sweep,
    values: &[f64],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if jobs <= 1 || values.len() <= 1 {
        return ablate(setup, data, sweep, values);
    }
    let jobs = jobs.min(values.len());
    let results: Vec<Result<Vec<(usize, AblationRow)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                scope.spawn(move || {
                    let idx: Vec<usize> = (j..values.len()).step_by(jobs).collect();
                    let vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
                    ablate(setup, data, sweep, &vals).map(|rows| idx.into_iter().zip(rows).collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let mut rows: Vec<(usize, AblationRow)> = Vec::with_capacity(values.len());
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// `value<TAB>auroc<TAB>pl_acc` lines; missing numbers print as `NA`.
pub fn format_table(rows: &[AblationRow]) -> String {
    let cell = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
    let mut out = String::from("value\tauroc\tpl_acc\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.value, cell(r.auroc), cell(r.pl_acc)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSetup {
        ExperimentSetup {
            synth: SynthConfig {
                vocab_size: 16,
                seq_len: 8,
                prompt_len: 4,
                pi: 0.5,
                ..Default::default()
            },
            model: ModelConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                vocab_size: 16,
                max_seq_len: 8,
                ..Default::default()
            },
            train: TrainConfig {
                n_initial_epochs: 2,
                n_augmented_epochs: 1,
                n_exemplars: 16,
                k_select: 8,
                layer: 0,
                ..Default::default()
            },
            n_records: 64,
            test_fraction: 0.5,
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = make_splits(&tiny()).unwrap();
        assert_eq!((s.exemplars.len(), s.pool.len(), s.test.len()), (16, 24, 24));
        let e = s.exemplars.ids();
        let p = s.pool.ids();
        assert!(s.test.ids().iter().all(|id| !e.contains(id) && !p.contains(id)));
    }

    #[test]
    fn sweep_rows_and_table() {
        let setup = tiny();
        let data = synth_generate(&setup.synth, setup.n_records).unwrap();
        let rows = ablate(&setup, &data, Sweep::Strength, &[0.1, 5.0]).unwrap();
        assert_eq!(rows.len(), 2);
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("0.1\t"));
        let gap = format_table(&[AblationRow { value: 4.0, auroc: None, pl_acc: None }]);
        assert_eq!(gap.lines().nth(1), Some("4\tNA\tNA"));
        assert!(matches!(apply_sweep(&setup, Sweep::K, 2.5), Err(TsvError::Config(_))));
        assert_eq!(apply_sweep(&setup, Sweep::Exemplars, 8.0).unwrap().train.n_exemplars, 8);
        assert_eq!(ablate_jobs(&setup, &data, Sweep::Strength, &[0.1, 5.0], 2).unwrap(), rows);
    }

    #[test]
    fn pl_acc_reselects_from_the_same_ranking() {
        let setup = tiny();
        let splits = make_splits(&setup).unwrap();
        let mut b = InProcessBackend::new(&setup.model).unwrap();
        let run = run_on(&setup.train, &mut b, &splits).unwrap();
        assert_eq!(run.pl_acc_at(8, &splits).unwrap(), run.outcome.pl_acc.unwrap());
    }
}
