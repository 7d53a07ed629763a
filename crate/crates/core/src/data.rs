//! Dataset types, the line-delimited JSON file format, exemplar/unlabeled
//! splitting and the template-based synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsvError};

pub const DATASET_FORMAT: &str = "tsvlab-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One of the two detection classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Truthful,
    Hallucinated,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Truthful, Class::Hallucinated];

    /// Column index used by every two-class matrix in the crate.
    pub fn index(self) -> usize {
        match self {
            Class::Truthful => 0,
            Class::Hallucinated => 1,
        }
    }

    pub fn from_index(i: usize) -> Class {
        if i == 0 {
            Class::Truthful
        } else {
            Class::Hallucinated
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Truthful => "truthful",
            Class::Hallucinated => "hallucinated",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Truthful,
    Hallucinated,
    Unlabeled,
}

impl Label {
    pub fn class(self) -> Option<Class> {
        match self {
            Label::Truthful => Some(Class::Truthful),
            Label::Hallucinated => Some(Class::Hallucinated),
            Label::Unlabeled => None,
        }
    }
}

impl From<Class> for Label {
    fn from(c: Class) -> Self {
        match c {
            Class::Truthful => Label::Truthful,
            Class::Hallucinated => Label::Hallucinated,
        }
    }
}

/// Prompt tokens followed by generation tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, prompt_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(TsvError::InvalidSequence("empty token list".into()));
        }
        if prompt_len == 0 || prompt_len > tokens.len() {
            return Err(TsvError::InvalidSequence(format!(
                "prompt_len {prompt_len} not in 1..={}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn generation_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleRecord {
    pub id: String,
    pub sequence: TokenSequence,
    pub label: Label,
    /// Ground truth of an unlabeled record, kept for audit metrics only.
    pub hidden_label: Option<Class>,
}

impl ExampleRecord {
    /// The known class of the record: its label, or failing that its hidden label.
    pub fn truth(&self) -> Option<Class> {
        self.label.class().or(self.hidden_label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<ExampleRecord>,
    vocab_size: u32,
}

impl Dataset {
    pub fn new(vocab_size: u32, records: Vec<ExampleRecord>) -> Result<Self> {
        if vocab_size == 0 {
            return Err(TsvError::Config("vocab_size must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(TsvError::DuplicateId(r.id.clone()));
            }
            if let Some(&token) = r.sequence.tokens().iter().find(|&&t| t >= vocab_size) {
                return Err(TsvError::TokenOutOfRange {
                    id: r.id.clone(),
                    token,
                    vocab_size,
                });
            }
        }
        Ok(Self {
            records,
            vocab_size,
        })
    }

    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> HashSet<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.records
            .iter()
            .filter(|r| r.label.class() == Some(class))
            .count()
    }

    /// Splits the dataset into an id/sequence-only view and the side channel
    /// holding whatever ground truth is known.
    pub fn unlabeled_view(&self) -> (UnlabeledSet, HiddenLabels) {
        let items = self
            .records
            .iter()
            .map(|r| UnlabeledItem {
                id: r.id.clone(),
                sequence: r.sequence.clone(),
            })
            .collect();
        let labels = self
            .records
            .iter()
            .filter_map(|r| r.truth().map(|c| (r.id.clone(), c)))
            .collect();
        (UnlabeledSet { items }, HiddenLabels { labels })
    }
}

/// Unlabeled data as seen by the training path: ids and tokens, nothing else.
#[derive(Debug, Clone, Default)]
pub struct UnlabeledSet {
    items: Vec<UnlabeledItem>,
}

#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub id: String,
    pub sequence: TokenSequence,
}

impl UnlabeledSet {
    pub fn items(&self) -> &[UnlabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Ground-truth labels of unlabeled records, for pseudo-label audits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HiddenLabels {
    labels: BTreeMap<String, Class>,
}

impl HiddenLabels {
    pub fn get(&self, id: &str) -> Option<Class> {
        self.labels.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_distribution(&self) -> Result<ClassDistribution> {
        let h = self
            .labels
            .values()
            .filter(|&&c| c == Class::Hallucinated)
            .count();
        ClassDistribution::from_counts(self.labels.len() - h, h)
    }
}

/// Class proportions `(w_truthful, w_hallucinated)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    truthful: f64,
    hallucinated: f64,
}

impl ClassDistribution {
    pub fn new(truthful: f64, hallucinated: f64) -> Result<Self> {
        let ok = truthful >= 0.0
            && hallucinated >= 0.0
            && ((truthful + hallucinated) - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(TsvError::Config(format!(
                "class distribution ({truthful}, {hallucinated}) is not a probability vector"
            )));
        }
        Ok(Self {
            truthful,
            hallucinated,
        })
    }

    pub fn uniform() -> Self {
        Self {
            truthful: 0.5,
            hallucinated: 0.5,
        }
    }

    /// Empirical frequencies; both classes must be present.
    pub fn from_counts(truthful: usize, hallucinated: usize) -> Result<Self> {
        if truthful == 0 {
            return Err(TsvError::DegenerateClass("truthful"));
        }
        if hallucinated == 0 {
            return Err(TsvError::DegenerateClass("hallucinated"));
        }
        let n = (truthful + hallucinated) as f64;
        // The complement of the smaller share keeps the sum at exactly 1.
        let (t, h) = if truthful <= hallucinated {
            let t = truthful as f64 / n;
            (t, 1.0 - t)
        } else {
            let h = hallucinated as f64 / n;
            (1.0 - h, h)
        };
        Ok(Self {
            truthful: t,
            hallucinated: h,
        })
    }

    pub fn get(&self, c: Class) -> f64 {
        match c {
            Class::Truthful => self.truthful,
            Class::Hallucinated => self.hallucinated,
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.truthful, self.hallucinated]
    }
}

/// Empirical class frequencies of a labeled exemplar set.
pub fn class_distribution_from_exemplars(exemplars: &Dataset) -> Result<ClassDistribution> {
    if exemplars.is_empty() {
        return Err(TsvError::Empty("exemplar set"));
    }
    if let Some(r) = exemplars.records().iter().find(|r| r.label.class().is_none()) {
        return Err(TsvError::Config(format!("exemplar {} is unlabeled", r.id)));
    }
    ClassDistribution::from_counts(
        exemplars.count(Class::Truthful),
        exemplars.count(Class::Hallucinated),
    )
}

/// Randomly draws `n_exemplar` labeled records as the exemplar set. Every
/// other record goes to the unlabeled set with its label moved to
/// `hidden_label`. Both outputs keep the input order.
pub fn split_exemplar_unlabeled(
    d: &Dataset,
    n_exemplar: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut labeled: Vec<usize> = (0..d.len())
        .filter(|&i| d.records[i].label.class().is_some())
        .collect();
    if labeled.len() < n_exemplar {
        return Err(TsvError::InsufficientLabeled {
            needed: n_exemplar,
            available: labeled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let chosen: HashSet<usize> = labeled[..n_exemplar].iter().copied().collect();

    let mut exemplars = Vec::with_capacity(n_exemplar);
    let mut unlabeled = Vec::with_capacity(d.len() - n_exemplar);
    for (i, r) in d.records.iter().enumerate() {
        if chosen.contains(&i) {
            exemplars.push(r.clone());
        } else {
            unlabeled.push(ExampleRecord {
                id: r.id.clone(),
                sequence: r.sequence.clone(),
                label: Label::Unlabeled,
                hidden_label: r.truth(),
            });
        }
    }
    Ok((
        Dataset::new(d.vocab_size, exemplars)?,
        Dataset::new(d.vocab_size, unlabeled)?,
    ))
}

/// Seeded random holdout of `round(fraction * len)` records. Records keep
/// their labels and the input order.
pub fn split_holdout(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TsvError::Config(format!(
            "holdout fraction {fraction} not in [0, 1]"
        )));
    }
    let n_hold = (fraction * d.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_401d);
    idx.shuffle(&mut rng);
    let held: HashSet<usize> = idx[..n_hold].iter().copied().collect();
    let (mut rest, mut hold) = (Vec::new(), Vec::new());
    for (i, r) in d.records.iter().enumerate() {
        if held.contains(&i) {
            hold.push(r.clone());
        } else {
            rest.push(r.clone());
        }
    }
    Ok((
        Dataset::new(d.vocab_size, rest)?,
        Dataset::new(d.vocab_size, hold)?,
    ))
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab_size: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    tokens: Vec<u32>,
    prompt_len: usize,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_label: Option<Class>,
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| TsvError::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
        None => {
            return Err(TsvError::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    if header.format != DATASET_FORMAT {
        return Err(TsvError::Parse {
            line: 1,
            msg: format!("unexpected format {:?}", header.format),
        });
    }
    if header.version != DATASET_VERSION {
        return Err(TsvError::VersionMismatch {
            expected: DATASET_VERSION,
            found: header.version as u64,
        });
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| TsvError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let sequence =
            TokenSequence::new(rec.tokens, rec.prompt_len).map_err(|e| TsvError::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        records.push(ExampleRecord {
            id: rec.id,
            sequence,
            label: rec.label,
            hidden_label: rec.hidden_label,
        });
    }
    Dataset::new(header.vocab_size, records)
}

pub fn write_dataset<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        vocab_size: d.vocab_size,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in &d.records {
        let line = RecordLine {
            id: r.id.clone(),
            tokens: r.sequence.tokens.clone(),
            prompt_len: r.sequence.prompt_len,
            label: r.label,
            hidden_label: r.hidden_label,
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(BufReader::new(f))
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| write_dataset(d, w))
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Parameters of the template generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub prompt_len: usize,
    /// Fraction of hallucinated records.
    pub pi: f64,
    /// Probability that a generation token is replaced by a uniform draw.
    pub template_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            prompt_len: 8,
            pi: 0.25,
            template_noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len == 0 || self.prompt_len == 0 {
            return Err(TsvError::Config(
                "vocab_size >= 2, seq_len >= 1 and prompt_len >= 1 required".into(),
            ));
        }
        if self.prompt_len >= self.seq_len {
            return Err(TsvError::Config(format!(
                "prompt_len {} must be < seq_len {}",
                self.prompt_len, self.seq_len
            )));
        }
        if !(0.0..=1.0).contains(&self.pi) || !(0.0..=1.0).contains(&self.template_noise) {
            return Err(TsvError::Config("pi and template_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-position categorical distributions: a shared prompt template and one
/// generation template per class. Template A puts its mass on the lower half
/// of the vocabulary, template B on the upper half.
struct Templates {
    prompt: Vec<WeightedIndex<f64>>,
    generation: [Vec<WeightedIndex<f64>>; 2],
}

impl Templates {
    fn build(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Templates {
        let v = cfg.vocab_size as usize;
        let half = v / 2;
        let table = |lo: usize, hi: usize, len: usize, rng: &mut ChaCha8Rng| {
            (0..len)
                .map(|_| {
                    let weights: Vec<f64> = (0..v)
                        .map(|t| {
                            if (lo..hi).contains(&t) {
                                // log-normal weights give each position a few favoured tokens
                                let z: f64 = rng.sample(rand_distr::StandardNormal);
                                (1.5 * z).exp()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    WeightedIndex::new(weights).expect("template weights are positive")
                })
                .collect::<Vec<_>>()
        };
        let gen_len = cfg.seq_len - cfg.prompt_len;
        let prompt = table(0, v, cfg.prompt_len, rng);
        let a = table(0, half.max(1), gen_len, rng);
        let b = table(half, v, gen_len, rng);
        Templates {
            prompt,
            generation: [a, b],
        }
    }
}

/// Draws `count` labeled records from the two-template mixture.
pub fn synth_generate(cfg: &SynthConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(TsvError::Empty("synth count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = Templates::build(cfg, &mut rng);
    let v = cfg.vocab_size;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let class = if rng.random_bool(cfg.pi) {
            Class::Hallucinated
        } else {
            Class::Truthful
        };
        let mut tokens = Vec::with_capacity(cfg.seq_len);
        for dist in &templates.prompt {
            tokens.push(dist.sample(&mut rng) as u32);
        }
        for dist in &templates.generation[class.index()] {
            let tok = if rng.random_bool(cfg.template_noise) {
                rng.random_range(0..v)
            } else {
                dist.sample(&mut rng) as u32
            };
            tokens.push(tok);
        }
        records.push(ExampleRecord {
            id: format!("s{}-{:05}", cfg.seed, i),
            sequence: TokenSequence::new(tokens, cfg.prompt_len)?,
            label: class.into(),
            hidden_label: None,
        });
    }
    Dataset::new(v, records)
}
