//! Synthetic corpora and classification tasks.
//!
//! Sequences come from a hidden-state Markov grammar: each state prefers
//! its own block of tokens, and a classification label is a threshold on how
//! often a marker state is occupied. A model pre-trained with masked-LM on the
//! grammar therefore carries features that transfer to the task.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::MetricKind;
use crate::model::{MlmBatch, TokenBatch};
use crate::rng::RngStream;

pub const CLS_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
pub const FIRST_CONTENT_TOKEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarSpec {
    pub vocab_size: usize,
    /// Full sequence length including the leading CLS token.
    pub seq_len: usize,
    pub num_states: usize,
    pub stay_prob: f64,
    /// Probability that a state emits from its own token block.
    pub focus: f64,
    pub zipf_exponent: f64,
    /// Seed of the grammar itself; corpora and tasks sharing it share structure.
    pub grammar_seed: u64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            seq_len: 32,
            num_states: 4,
            stay_prob: 0.8,
            focus: 0.85,
            zipf_exponent: 1.0,
            grammar_seed: 1,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN);
        if self.num_states < 2 || content < self.num_states {
            return Err(LabError::invalid(format!(
                "grammar needs >= 2 states and one content token per state (vocab {}, states {})",
                self.vocab_size, self.num_states
            )));
        }
        if self.seq_len < 2 {
            return Err(LabError::invalid("grammar seq_len must be >= 2"));
        }
        for (name, v) in [("stay_prob", self.stay_prob), ("focus", self.focus)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LabError::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(LabError::invalid("zipf_exponent must be >= 0"));
        }
        Ok(())
    }
}

/// A realised grammar: token blocks and emission weights per state.
#[derive(Debug, Clone)]
pub struct Grammar {
    spec: GrammarSpec,
    blocks: Vec<Vec<usize>>,
    block_weights: Vec<Vec<f64>>,
}

impl Grammar {
    pub fn new(spec: &GrammarSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::root(spec.grammar_seed).split("grammar");
        let mut tokens: Vec<usize> = (FIRST_CONTENT_TOKEN..spec.vocab_size).collect();
        rng.shuffle(&mut tokens);
        let per = tokens.len() / spec.num_states;
        let blocks: Vec<Vec<usize>> = (0..spec.num_states)
            .map(|s| tokens[s * per..(s + 1) * per].to_vec())
            .collect();
        let block_weights = blocks
            .iter()
            .map(|b| {
                (0..b.len())
                    .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
                    .collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            blocks,
            block_weights,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    fn next_state(&self, state: usize, rng: &mut RngStream) -> usize {
        if rng.bernoulli(self.spec.stay_prob) {
            return state;
        }
        let other = rng.below(self.spec.num_states - 1);
        if other >= state {
            other + 1
        } else {
            other
        }
    }

    fn emit(&self, state: usize, rng: &mut RngStream) -> usize {
        if rng.bernoulli(self.spec.focus) {
            self.blocks[state][rng.categorical(&self.block_weights[state])]
        } else {
            FIRST_CONTENT_TOKEN + rng.below(self.spec.vocab_size - FIRST_CONTENT_TOKEN)
        }
    }

    /// One sequence and the number of content positions spent in state 0.
    pub fn sample(&self, rng: &mut RngStream) -> (Vec<usize>, usize) {
        let mut tokens = Vec::with_capacity(self.spec.seq_len);
        tokens.push(CLS_TOKEN);
        let mut state = rng.below(self.spec.num_states);
        let mut marker = 0;
        for pos in 1..self.spec.seq_len {
            if pos > 1 {
                state = self.next_state(state, rng);
            }
            marker += usize::from(state == 0);
            tokens.push(self.emit(state, rng));
        }
        (tokens, marker)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
    pub vocab_size: usize,
    pub spec: GrammarSpec,
    pub seed: u64,
}

pub fn generate_corpus(spec: &GrammarSpec, seed: u64, size: usize) -> Result<Corpus> {
    if size == 0 {
        return Err(LabError::invalid("corpus size must be >= 1"));
    }
    let grammar = Grammar::new(spec)?;
    let mut rng = RngStream::root(seed).split("corpus");
    let sequences = (0..size).map(|_| grammar.sample(&mut rng).0).collect();
    Ok(Corpus {
        sequences,
        vocab_size: spec.vocab_size,
        spec: spec.clone(),
        seed,
    })
}

impl Corpus {
    /// Unigram entropy (nats) of the content tokens.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab_size];
        let mut total = 0usize;
        for s in &self.sequences {
            for &t in &s[1..] {
                counts[t] += 1;
                total += 1;
            }
        }
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    /// Splits off the last `n` sequences as a held-out corpus.
    pub fn split_off(&mut self, n: usize) -> Result<Corpus> {
        if n == 0 || n >= self.sequences.len() {
            return Err(LabError::invalid(format!(
                "cannot hold out {n} of {} sequences",
                self.sequences.len()
            )));
        }
        let rest = self.sequences.split_off(self.sequences.len() - n);
        Ok(Corpus {
            sequences: rest,
            vocab_size: self.vocab_size,
            spec: self.spec.clone(),
            seed: self.seed,
        })
    }

    pub fn content_hash(&self) -> String {
        hash_rows(self.sequences.iter().map(|s| (s.as_slice(), None)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: Split,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub grammar: GrammarSpec,
    pub train_size: usize,
    pub dev_size: usize,
    pub num_classes: usize,
    /// Share of class 0; the remaining classes split the rest evenly.
    pub majority_fraction: f64,
    pub metric: MetricKind,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            grammar: GrammarSpec::default(),
            train_size: 2491,
            dev_size: 277,
            num_classes: 2,
            majority_fraction: 0.53,
            metric: MetricKind::Accuracy,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(LabError::invalid("train_size and dev_size must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(LabError::invalid("num_classes must be >= 2"));
        }
        if self.metric != MetricKind::Accuracy && self.num_classes != 2 {
            return Err(LabError::invalid(format!(
                "metric {} needs a binary task",
                self.metric.name()
            )));
        }
        let min_share = 1.0 / self.num_classes as f64;
        if !(self.majority_fraction >= min_share && self.majority_fraction < 1.0) {
            return Err(LabError::invalid(format!(
                "majority_fraction must lie in [{min_share}, 1), got {}",
                self.majority_fraction
            )));
        }
        Ok(())
    }

    fn class_weights(&self) -> Vec<f64> {
        let rest = (1.0 - self.majority_fraction) / (self.num_classes - 1) as f64;
        let mut w = vec![rest; self.num_classes];
        w[0] = self.majority_fraction;
        w
    }
}

const CALIBRATION_SAMPLES: usize = 4096;
const MAX_ATTEMPTS: usize = 100_000;

/// Marker-occupancy cut points splitting the grammar's natural distribution
/// into `num_classes` roughly equal bins.
fn occupancy_cuts(grammar: &Grammar, num_classes: usize) -> Vec<usize> {
    let mut rng = RngStream::root(grammar.spec.grammar_seed).split("calibration");
    let mut occ: Vec<usize> = (0..CALIBRATION_SAMPLES).map(|_| grammar.sample(&mut rng).1).collect();
    occ.sort_unstable();
    let mut cuts: Vec<usize> = (1..num_classes)
        .map(|j| occ[j * CALIBRATION_SAMPLES / num_classes].max(1))
        .collect();
    for i in 1..cuts.len() {
        cuts[i] = cuts[i].max(cuts[i - 1] + 1);
    }
    cuts
}

fn class_of(marker: usize, cuts: &[usize]) -> usize {
    cuts.iter().filter(|&&c| marker >= c).count()
}

fn sample_labelled(
    grammar: &Grammar,
    cuts: &[usize],
    label: usize,
    rng: &mut RngStream,
    exclude: Option<&HashSet<Example>>,
) -> Result<Example> {
    for _ in 0..MAX_ATTEMPTS {
        let (tokens, marker) = grammar.sample(rng);
        if class_of(marker, cuts) != label {
            continue;
        }
        let ex = Example { tokens, label };
        if exclude.is_some_and(|set| set.contains(&ex)) {
            continue;
        }
        return Ok(ex);
    }
    Err(LabError::invalid(format!(
        "grammar rarely produces class {label}; adjust the grammar spec"
    )))
}

/// Train and dev splits. Labels are drawn first from the class weights, then
/// sequences are rejection-sampled until their latent class matches; dev
/// examples never repeat a train example.
pub fn generate_classification_task(spec: &TaskSpec, seed: u64) -> Result<(TaskDataset, TaskDataset)> {
    spec.validate()?;
    let grammar = Grammar::new(&spec.grammar)?;
    let cuts = occupancy_cuts(&grammar, spec.num_classes);
    let weights = spec.class_weights();
    let root = RngStream::root(seed).split("task");

    let draw = |split: &str, n: usize, exclude: Option<&HashSet<Example>>| -> Result<Vec<Example>> {
        let mut labels = root.split(split).split("labels");
        let mut seqs = root.split(split).split("sequences");
        (0..n)
            .map(|_| {
                let label = labels.categorical(&weights);
                sample_labelled(&grammar, &cuts, label, &mut seqs, exclude)
            })
            .collect()
    };

    let train = draw("train", spec.train_size, None)?;
    let seen: HashSet<Example> = train.iter().cloned().collect();
    let dev = draw("dev", spec.dev_size, Some(&seen))?;
    let make = |examples, split| TaskDataset {
        examples,
        num_classes: spec.num_classes,
        split,
        metric: spec.metric,
    };
    Ok((make(train, Split::Train), make(dev, Split::Dev)))
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    /// Most frequent label; ties go to the higher label.
    pub fn majority_label(&self) -> Result<usize> {
        if self.is_empty() {
            return Err(LabError::invalid("majority label of an empty dataset"));
        }
        let counts = self.label_counts();
        let best = *counts.iter().max().expect("non-empty counts");
        Ok(counts.iter().rposition(|&c| c == best).expect("max exists"))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let rows = indices.iter().map(|&i| self.examples[i].tokens.as_slice());
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((TokenBatch::from_rows(rows)?, labels))
    }

    pub fn content_hash(&self) -> String {
        hash_rows(self.examples.iter().map(|e| (e.tokens.as_slice(), Some(e.label))))
    }

    /// CSV with a space-separated `tokens` column and a `label` column.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let fmt_err = |e: csv::Error| LabError::Format(e.to_string());
        out.write_record(["tokens", "label"]).map_err(fmt_err)?;
        for e in &self.examples {
            let tokens = e.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            out.write_record([tokens, e.label.to_string()]).map_err(fmt_err)?;
        }
        out.flush().map_err(|e| LabError::Format(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Metric of always predicting the dataset's own majority label.
pub fn majority_baseline(dataset: &TaskDataset) -> Result<f64> {
    let label = dataset.majority_label()?;
    constant_baseline(dataset, label)
}

/// Metric of always predicting `label` on `dataset`.
pub fn constant_baseline(dataset: &TaskDataset, label: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(LabError::invalid("baseline of an empty dataset"));
    }
    let preds = vec![label; dataset.len()];
    dataset.metric.evaluate(&preds, &dataset.labels())
}

/// Uniform sample of `n` examples without replacement, in sampled order.
pub fn downsample(dataset: &TaskDataset, n: usize, seed: u64) -> Result<TaskDataset> {
    if n > dataset.len() {
        return Err(LabError::invalid(format!(
            "cannot downsample {} examples to {n}",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    RngStream::root(seed).split("downsample").shuffle(&mut idx);
    Ok(TaskDataset {
        examples: idx[..n].iter().map(|&i| dataset.examples[i].clone()).collect(),
        ..dataset.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    /// Selection probability per content position; 1.0 selects every position.
    pub rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(LabError::invalid(format!("mask rate must lie in (0, 1], got {}", self.rate)));
        }
        let (m, r) = (self.mask_fraction, self.random_fraction);
        if !(m >= 0.0 && r >= 0.0 && m + r <= 1.0) {
            return Err(LabError::invalid("mask and random fractions must be >= 0 and sum to <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// BERT-style masking of the content positions (the CLS slot is never picked).
pub fn mask_tokens(
    sequence: &[usize],
    rng: &mut RngStream,
    policy: &MaskPolicy,
    vocab_size: usize,
) -> Result<MaskedSequence> {
    policy.validate()?;
    if sequence.len() < 2 {
        return Err(LabError::invalid("masking needs at least one content position"));
    }
    let mut select = || -> Vec<usize> {
        (1..sequence.len()).filter(|_| rng.bernoulli(policy.rate)).collect()
    };
    let mut positions = select();
    if positions.is_empty() {
        positions = select();
    }
    if positions.is_empty() {
        positions = vec![1 + rng.below(sequence.len() - 1)];
    }
    let mut input = sequence.to_vec();
    let targets = positions.iter().map(|&p| sequence[p]).collect();
    for &p in &positions {
        let u = rng.uniform();
        if u < policy.mask_fraction {
            input[p] = MASK_TOKEN;
        } else if u < policy.mask_fraction + policy.random_fraction {
            input[p] = FIRST_CONTENT_TOKEN + rng.below(vocab_size - FIRST_CONTENT_TOKEN);
        }
    }
    Ok(MaskedSequence {
        input,
        positions,
        targets,
    })
}

/// Masks every row with one stream and flattens positions to `row * seq_len + col`.
pub fn mlm_batch(
    rows: &[&[usize]],
    rng: &mut RngStream,
    policy: &MaskPolicy,
    vocab_size: usize,
) -> Result<MlmBatch> {
    let mut inputs = Vec::with_capacity(rows.len());
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let m = mask_tokens(row, rng, policy, vocab_size)?;
        positions.extend(m.positions.iter().map(|p| r * row.len() + p));
        targets.extend(m.targets);
        inputs.push(m.input);
    }
    Ok(MlmBatch {
        input: TokenBatch::from_rows(inputs.iter().map(Vec::as_slice))?,
        positions,
        targets,
    })
}

fn hash_rows<'a>(rows: impl Iterator<Item = (&'a [usize], Option<usize>)>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (tokens, label) in rows {
        for &t in tokens {
            h.update((t as u64).to_le_bytes());
        }
        h.update(label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
        h.update(b"\n");
    }
    crate::params::hex(&h.finalize())
}
