//! Confident pseudo-label selection and exemplar-set augmentation.

use std::collections::{HashMap, HashSet};

use log::warn;

use crate::data::{Dataset, HiddenLabels, TokenSequence, UnlabeledSet};
use crate::error::{Result, TsvError};
use crate::vmf::{cross_entropy, TargetDistribution};

/// Cross-entropy `omega` of a pseudo-label against the model posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRecord {
    pub id: String,
    pub omega: f64,
    pub q: TargetDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Ascending `omega`, ties by ascending id.
    pub selected: Vec<UncertaintyRecord>,
    pub k_requested: usize,
}

impl SelectionResult {
    pub fn empty() -> Self {
        Self {
            selected: Vec::new(),
            k_requested: 0,
        }
    }

    pub fn k_effective(&self) -> usize {
        self.selected.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.selected.iter().map(|r| r.id.as_str())
    }
}

/// `omega_i = -sum_c q_i(c) log p_i(c)` for id-aligned pseudo-labels and posteriors.
pub fn uncertainty_scores(
    qs: &[(String, TargetDistribution)],
    ps: &[(String, [f64; 2])],
) -> Result<Vec<UncertaintyRecord>> {
    if qs.len() != ps.len() {
        return Err(TsvError::IdMismatch(format!(
            "{} pseudo-labels vs {} posteriors",
            qs.len(),
            ps.len()
        )));
    }
    qs.iter()
        .zip(ps)
        .map(|((qid, q), (pid, p))| {
            if qid != pid {
                return Err(TsvError::IdMismatch(format!("{qid} vs {pid}")));
            }
            let omega = cross_entropy(q, p);
            if !omega.is_finite() {
                return Err(TsvError::NonFinite(format!("uncertainty of {qid}")));
            }
            Ok(UncertaintyRecord {
                id: qid.clone(),
                omega,
                q: *q,
            })
        })
        .collect()
}

/// The `k` records with the lowest `omega`.
pub fn select_topk(records: &[UncertaintyRecord], k: usize) -> Result<SelectionResult> {
    if records.is_empty() {
        return Err(TsvError::Empty("uncertainty records"));
    }
    if k == 0 {
        return Err(TsvError::Config("K must be >= 1".into()));
    }
    if k > records.len() {
        warn!("K = {k} exceeds the {} unlabeled records; selecting all", records.len());
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.omega.total_cmp(&b.omega).then_with(|| a.id.cmp(&b.id)));
    sorted.truncate(k);
    Ok(SelectionResult {
        selected: sorted,
        k_requested: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Exemplar,
    PseudoLabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub id: String,
    pub sequence: TokenSequence,
    pub target: TargetDistribution,
    pub provenance: Provenance,
}

/// Exemplars with one-hot targets plus any pseudo-labeled additions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    items: Vec<TrainingItem>,
}

impl TrainingSet {
    pub fn from_exemplars(exemplars: &Dataset) -> Result<Self> {
        let items = exemplars
            .records()
            .iter()
            .map(|r| {
                let c = r
                    .label
                    .class()
                    .ok_or_else(|| TsvError::Config(format!("exemplar {} is unlabeled", r.id)))?;
                Ok(TrainingItem {
                    id: r.id.clone(),
                    sequence: r.sequence.clone(),
                    target: TargetDistribution::one_hot(c),
                    provenance: Provenance::Exemplar,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn items(&self) -> &[TrainingItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> HashSet<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }
}

/// Appends the selected unlabeled examples with their pseudo-label targets
/// (hardened to one-hot when `hard_labels`).
pub fn augment_exemplars(
    base: &TrainingSet,
    selected: &SelectionResult,
    pool: &UnlabeledSet,
    hard_labels: bool,
) -> Result<TrainingSet> {
    let by_id: HashMap<&str, &TokenSequence> = pool
        .items()
        .iter()
        .map(|it| (it.id.as_str(), &it.sequence))
        .collect();
    let mut seen = base.ids();
    let mut items = base.items.clone();
    for rec in &selected.selected {
        let seq = by_id
            .get(rec.id.as_str())
            .ok_or_else(|| TsvError::IdMismatch(format!("selected id {} not in unlabeled set", rec.id)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(TsvError::DuplicateId(rec.id.clone()));
        }
        items.push(TrainingItem {
            id: rec.id.clone(),
            sequence: (*seq).clone(),
            target: if hard_labels { rec.q.hardened() } else { rec.q },
            provenance: Provenance::PseudoLabeled,
        });
    }
    Ok(TrainingSet { items })
}

/// Fraction of selected examples whose pseudo-label argmax is the true class.
/// Exact ties count as wrong.
pub fn pseudo_label_accuracy(selected: &SelectionResult, hidden: &HiddenLabels) -> Result<f64> {
    if selected.selected.is_empty() {
        return Err(TsvError::Empty("selection"));
    }
    let mut correct = 0usize;
    for rec in &selected.selected {
        let truth = hidden
            .get(&rec.id)
            .ok_or_else(|| TsvError::MissingLabels(rec.id.clone()))?;
        if rec.q.argmax() == Some(truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / selected.selected.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_exemplar_unlabeled, ExampleRecord, Label};
    use proptest::prelude::*;

    fn urec(id: &str, omega: f64) -> UncertaintyRecord {
        UncertaintyRecord {
            id: id.into(),
            omega,
            q: TargetDistribution::new(0.5, 0.5).unwrap(),
        }
    }

    fn dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| ExampleRecord {
                id: format!("r{i:03}"),
                sequence: TokenSequence::new(vec![i as u32 % 4, 1], 1).unwrap(),
                label: if i % 2 == 0 { Label::Truthful } else { Label::Hallucinated },
                hidden_label: None,
            })
            .collect();
        Dataset::new(4, records).unwrap()
    }

    #[test]
    fn uncertainty_cases() {
        let qs = vec![
            ("a".to_string(), TargetDistribution::one_hot(crate::data::Class::Truthful)),
            ("b".to_string(), TargetDistribution::new(0.5, 0.5).unwrap()),
            ("c".to_string(), TargetDistribution::new(0.2, 0.8).unwrap()),
        ];
        let ps = vec![
            ("a".to_string(), [1.0, 0.0]),
            ("b".to_string(), [0.5, 0.5]),
            ("c".to_string(), [0.3, 0.7]),
        ];
        let recs = uncertainty_scores(&qs, &ps).unwrap();
        assert_eq!(recs[0].omega, 0.0);
        assert!((recs[1].omega - std::f64::consts::LN_2).abs() < 1e-15);
        let expect = -(0.2 * 0.3f64.ln() + 0.8 * 0.7f64.ln());
        assert!((recs[2].omega - expect).abs() < 1e-15);

        let mut bad = ps.clone();
        bad[1].0 = "z".into();
        assert!(matches!(uncertainty_scores(&qs, &bad), Err(TsvError::IdMismatch(_))));
        assert!(uncertainty_scores(&qs, &ps[..2]).is_err());
    }

    #[test]
    fn topk_cases() {
        let recs = vec![urec("a", 0.1), urec("b", 0.5), urec("c", 0.3)];
        let sel = select_topk(&recs, 2).unwrap();
        assert_eq!(sel.ids().collect::<Vec<_>>(), vec!["a", "c"]);
        let all = select_topk(&recs, 3).unwrap();
        assert_eq!(all.k_effective(), 3);
        let over = select_topk(&recs, 10).unwrap();
        assert_eq!(over.k_effective(), 3);
        assert!(select_topk(&[], 1).is_err());
        assert!(select_topk(&recs, 0).is_err());

        let ties = vec![urec("b", 0.2), urec("a", 0.2), urec("c", 0.1)];
        assert_eq!(select_topk(&ties, 2).unwrap().ids().collect::<Vec<_>>(), vec!["c", "a"]);
    }

    #[test]
    fn augmentation_sizes_and_guards() {
        let d = dataset(200);
        let (ex, un) = split_exemplar_unlabeled(&d, 32, 1).unwrap();
        let (pool, _) = un.unlabeled_view();
        let base = TrainingSet::from_exemplars(&ex).unwrap();

        let same = augment_exemplars(&base, &SelectionResult::empty(), &pool, false).unwrap();
        assert_eq!(same, base);

        let recs: Vec<_> = pool.items().iter().enumerate().map(|(i, it)| urec(&it.id, i as f64)).collect();
        let sel = select_topk(&recs, 128).unwrap();
        let aug = augment_exemplars(&base, &sel, &pool, false).unwrap();
        assert_eq!(aug.len(), 160);
        assert_eq!(base.len(), 32);
        assert_eq!(
            aug.items().iter().filter(|i| i.provenance == Provenance::PseudoLabeled).count(),
            128
        );
        assert!(matches!(
            augment_exemplars(&aug, &sel, &pool, false),
            Err(TsvError::DuplicateId(_))
        ));

        let missing = SelectionResult { selected: vec![urec("nope", 0.0)], k_requested: 1 };
        assert!(augment_exemplars(&base, &missing, &pool, false).is_err());
    }

    #[test]
    fn hardened_targets_are_one_hot() {
        let d = dataset(10);
        let (ex, un) = split_exemplar_unlabeled(&d, 2, 1).unwrap();
        let (pool, _) = un.unlabeled_view();
        let base = TrainingSet::from_exemplars(&ex).unwrap();
        let mut r = urec(&pool.items()[0].id, 0.0);
        r.q = TargetDistribution::new(0.7, 0.3).unwrap();
        let sel = SelectionResult { selected: vec![r], k_requested: 1 };
        let aug = augment_exemplars(&base, &sel, &pool, true).unwrap();
        assert_eq!(aug.items().last().unwrap().target.as_array(), [1.0, 0.0]);
    }

    #[test]
    fn accuracy_cases() {
        let d = dataset(8);
        let (_, un) = split_exemplar_unlabeled(&d, 0, 1).unwrap();
        let (_, hidden) = un.unlabeled_view();
        let mk = |id: &str, t: f64| UncertaintyRecord {
            id: id.into(),
            omega: 0.0,
            q: TargetDistribution::new(t, 1.0 - t).unwrap(),
        };
        // r000 truthful, r001 hallucinated
        let right = SelectionResult { selected: vec![mk("r000", 0.9), mk("r001", 0.1)], k_requested: 2 };
        assert_eq!(pseudo_label_accuracy(&right, &hidden).unwrap(), 1.0);
        let half = SelectionResult { selected: vec![mk("r000", 0.9), mk("r001", 0.9)], k_requested: 2 };
        assert_eq!(pseudo_label_accuracy(&half, &hidden).unwrap(), 0.5);
        let tie = SelectionResult { selected: vec![mk("r000", 0.5)], k_requested: 1 };
        assert_eq!(pseudo_label_accuracy(&tie, &hidden).unwrap(), 0.0);
        let unknown = SelectionResult { selected: vec![mk("zzz", 0.9)], k_requested: 1 };
        assert!(matches!(pseudo_label_accuracy(&unknown, &hidden), Err(TsvError::MissingLabels(_))));
    }

    proptest! {
        #[test]
        fn topk_equals_sort_prefix(omegas in proptest::collection::vec(0u32..50, 1..100), k in 1usize..120) {
            // small integer omegas force plenty of ties
            let recs: Vec<_> = omegas.iter().enumerate()
                .map(|(i, &o)| urec(&format!("id{i:03}"), o as f64 / 10.0))
                .collect();
            let sel = select_topk(&recs, k).unwrap();
            let mut oracle: Vec<(f64, String)> = recs.iter().map(|r| (r.omega, r.id.clone())).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<String> = oracle.into_iter().take(k).map(|x| x.1).collect();
            let got: Vec<String> = sel.ids().map(String::from).collect();
            prop_assert_eq!(&got, &expect);
            prop_assert_eq!(sel.k_effective(), k.min(recs.len()));
            let chosen: HashSet<&str> = sel.ids().collect();
            let max_sel = sel.selected.iter().map(|r| r.omega).fold(f64::NEG_INFINITY, f64::max);
            for r in recs.iter().filter(|r| !chosen.contains(r.id.as_str())) {
                prop_assert!(max_sel <= r.omega);
            }
        }
    }
}
