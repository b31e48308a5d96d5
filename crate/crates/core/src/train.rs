//! Instrumented pre-training and fine-tuning loops.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{constant_baseline, mlm_batch, Corpus, MaskPolicy, TaskDataset};
use crate::error::{LabError, Result};
use crate::metrics::MetricKind;
use crate::model::{MlmBatch, 
    classify_graph, forward_classify, forward_mlm, layer_index, mlm_graph, reinit_classifier,
    Checkpoint, Mode, ModelConfig,
};
use crate::optim::{
    adam_update, clip_global_norm, warmup_linear_lr, AdamConfig, AdamState, ScheduleConfig, ScheduleKind,
};
use crate::params::ParamStore;
use crate::rng::RngStream;

pub const DEFAULT_WARMUP_RATIO: f64 = 0.1;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: Option<u64>,
    pub total_iterations: Option<u64>,
    pub batch_size: usize,
    pub eval_every: u64,
    pub adam: AdamConfig,
    pub schedule: ScheduleSpec,
    pub dropout: Option<f64>,
    pub norm_granularity: Granularity,
    pub mask: MaskPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: Some(3),
            total_iterations: None,
            batch_size: 16,
            eval_every: 10,
            adam: AdamConfig::default(),
            schedule: ScheduleSpec::default(),
            dropout: None,
            norm_granularity: Granularity::Layer,
            mask: MaskPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.epochs, self.total_iterations) {
            (Some(0), None) | (None, Some(0)) => {
                return Err(LabError::invalid("epochs / total_iterations must be >= 1"))
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(LabError::invalid(
                    "set exactly one of run.epochs and run.total_iterations",
                ))
            }
        }
        if self.batch_size == 0 {
            return Err(LabError::invalid("batch_size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(LabError::invalid("eval_every must be >= 1"));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(LabError::invalid(format!("dropout {p} outside [0, 1)")));
            }
        }
        self.adam.validate()?;
        self.mask.validate()
    }

    pub fn iterations_per_epoch(&self, train_size: usize) -> u64 {
        train_size.div_ceil(self.batch_size) as u64
    }

    pub fn total_iterations_for(&self, train_size: usize) -> u64 {
        match (self.epochs, self.total_iterations) {
            (_, Some(t)) => t,
            (Some(e), None) => e * self.iterations_per_epoch(train_size),
            (None, None) => 0,
        }
    }

    pub fn schedule_for(&self, total: u64) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.schedule.total_steps.unwrap_or(total),
            warmup_ratio: self.schedule.warmup_ratio,
            base_lr: self.schedule.base_lr.unwrap_or(self.adam.alpha),
            kind: self.schedule.kind,
        }
    }
}

/// Learning-rate schedule; unset fields follow the run length and `adam.alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup_ratio: f64,
    pub base_lr: Option<f64>,
    pub total_steps: Option<u64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::WarmupLinear,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            base_lr: None,
            total_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// `embeddings`, `layer{i}`, `pooler`, `classifier`.
    #[default]
    Layer,
    /// One group per weight matrix, e.g. `layer3.attention.key`.
    Matrix,
}

fn group_of(name: &str, granularity: Granularity) -> String {
    match granularity {
        Granularity::Layer => match layer_index(name) {
            Some(i) => format!("layer{i}"),
            None => match name.split('.').next().unwrap_or(name) {
                // The masked-LM head is tied to the token embeddings.
                "mlm_head" => "embeddings".to_string(),
                head => head.to_string(),
            },
        },
        Granularity::Matrix => name.rsplit_once('.').map_or(name, |(g, _)| g).to_string(),
    }
}

/// L2 norm per parameter group, accumulated in f64.
pub fn layer_gradient_norms<T: crate::tensor::Real>(
    grads: &ParamStore<T>,
    granularity: Granularity,
) -> IndexMap<String, f64> {
    let mut sq: IndexMap<String, f64> = IndexMap::new();
    for (name, g) in grads.iter() {
        *sq.entry(group_of(name, granularity)).or_insert(0.0) += g.sum_sq_f64();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// A run fails when its final metric does not exceed the baseline.
pub fn classify_failed_run(final_metric: f64, baseline: f64) -> bool {
    final_metric <= baseline
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Finetune,
    Pretrain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    /// Dev metric for fine-tuning, held-out perplexity for pre-training.
    pub metric: f64,
    /// Mean training loss since the previous evaluation (NaN at iteration 0).
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: RunKind,
    pub config: RunConfig,
    pub metric: Option<MetricKind>,
    pub planned_iterations: u64,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub factors: Vec<f64>,
    pub grad_norms: IndexMap<String, Vec<f64>>,
    pub evals: Vec<EvalPoint>,
    pub final_metric: f64,
    /// Mean training loss over the last epoch's iterations.
    pub final_train_loss: f64,
    pub baseline: f64,
    pub failed: bool,
    pub failure_reason: Option<String>,
    /// Per dev example: whether the final model classifies it correctly.
    pub dev_correct: Vec<bool>,
    /// Not part of any persisted artefact.
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }

    pub fn diverged(&self) -> bool {
        self.failure_reason.as_deref() == Some("divergence")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevEval {
    pub metric: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Full-split evaluation with dropout disabled.
pub fn evaluate_classifier(
    params: &ParamStore<f32>,
    config: &ModelConfig,
    dataset: &TaskDataset,
) -> Result<DevEval> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (tokens, labels) = dataset.batch(chunk)?;
        let out = forward_classify(params, config, &tokens, &labels, Mode::Eval, None)?;
        loss_sum += out.loss * chunk.len() as f64;
        predictions.extend(out.predictions);
    }
    Ok(DevEval {
        metric: dataset.metric.evaluate(&predictions, &dataset.labels())?,
        loss: loss_sum / dataset.len() as f64,
        predictions,
    })
}

/// Masked batches of `corpus` in evaluation chunks, with masks drawn from
/// `mask_seed` alone.
pub fn fixed_mask_batches(
    corpus: &Corpus,
    policy: &MaskPolicy,
    vocab_size: usize,
    mask_seed: u64,
) -> Result<Vec<MlmBatch>> {
    let mut rng = RngStream::root(mask_seed).split("masking");
    corpus
        .sequences
        .chunks(EVAL_CHUNK)
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            mlm_batch(&rows, &mut rng, policy, vocab_size)
        })
        .collect()
}

/// Token-weighted masked-LM perplexity over prepared batches.
pub fn batches_perplexity(params: &ParamStore<f32>, config: &ModelConfig, batches: &[MlmBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let out = forward_mlm(params, config, batch, Mode::Eval, None)?;
        total += out.loss * batch.targets.len() as f64;
        count += batch.targets.len();
    }
    if count == 0 {
        return Err(LabError::invalid("perplexity over no masked positions"));
    }
    Ok((total / count as f64).exp())
}

/// Held-out masked-LM perplexity with masks fixed by `mask_seed`.
pub fn heldout_perplexity(
    params: &ParamStore<f32>,
    config: &ModelConfig,
    corpus: &Corpus,
    policy: &MaskPolicy,
    mask_seed: u64,
) -> Result<f64> {
    let batches = fixed_mask_batches(corpus, policy, config.vocab_size, mask_seed)?;
    batches_perplexity(params, config, &batches)
}

struct Trace {
    losses: Vec<f64>,
    lrs: Vec<f64>,
    factors: Vec<f64>,
    grad_norms: IndexMap<String, Vec<f64>>,
    evals: Vec<EvalPoint>,
    since_eval: Vec<f64>,
}

impl Trace {
    fn new(planned: u64) -> Self {
        let n = planned as usize;
        Self {
            losses: Vec::with_capacity(n),
            lrs: Vec::with_capacity(n),
            factors: Vec::with_capacity(n),
            grad_norms: IndexMap::new(),
            evals: Vec::new(),
            since_eval: Vec::new(),
        }
    }

    fn eval(&mut self, iteration: u64, metric: f64) {
        let train_loss = if self.since_eval.is_empty() {
            f64::NAN
        } else {
            self.since_eval.iter().sum::<f64>() / self.since_eval.len() as f64
        };
        self.since_eval.clear();
        self.evals.push(EvalPoint {
            iteration,
            metric,
            train_loss,
        });
    }

    fn last_epoch_loss(&self, per_epoch: u64) -> f64 {
        let n = (per_epoch as usize).min(self.losses.len()).max(1);
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

enum StepOutcome {
    Ok,
    Diverged,
}

struct Stepper<'a> {
    config: &'a RunConfig,
    schedule: ScheduleConfig,
    state: AdamState,
}

impl Stepper<'_> {
    fn step(&mut self, params: &mut ParamStore<f32>, grads: ParamStore<f32>, loss: f64, trace: &mut Trace) -> Result<StepOutcome> {
        let mut grads = complete(params, grads)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Ok(StepOutcome::Diverged);
        }
        for (group, norm) in layer_gradient_norms(&grads, self.config.norm_granularity) {
            trace.grad_norms.entry(group).or_default().push(norm);
        }
        if let Some(c) = self.config.adam.clip_norm {
            clip_global_norm(&mut grads, c)?;
        }
        let t = self.state.step + 1;
        let lr = warmup_linear_lr(t, &self.schedule)?;
        let info = adam_update(params, &grads, &mut self.state, &self.config.adam, lr)?;
        trace.losses.push(loss);
        trace.lrs.push(info.scheduled_lr);
        trace.factors.push(info.factor);
        trace.since_eval.push(loss);
        Ok(StepOutcome::Ok)
    }
}

/// Gradients for every parameter, zero where the graph did not touch one.
fn complete(params: &ParamStore<f32>, grads: ParamStore<f32>) -> Result<ParamStore<f32>> {
    if grads.same_layout(params) {
        return Ok(grads);
    }
    let mut full = params.zeros_like();
    for (name, g) in grads.iter() {
        full.set(name, g.clone())?;
    }
    Ok(full)
}

fn run_model_config(init: &Checkpoint, config: &RunConfig) -> ModelConfig {
    let mut m = init.config;
    if let Some(p) = config.dropout {
        m.dropout_p = p;
    }
    m
}

/// Fine-tunes `init` on `train`, evaluating on `dev`. The classifier head is
/// re-initialised from the run seed; everything else starts from `init`.
pub fn run_finetune(
    config: &RunConfig,
    train: &TaskDataset,
    dev: &TaskDataset,
    init: &Checkpoint,
) -> Result<(RunRecord, Checkpoint)> {
    let started = std::time::Instant::now();
    config.validate()?;
    init.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(LabError::invalid("fine-tuning needs non-empty train and dev splits"));
    }
    if train.num_classes != init.config.num_classes {
        return Err(LabError::ConfigMismatch(format!(
            "task has {} classes, model {}",
            train.num_classes, init.config.num_classes
        )));
    }
    check_tokens(train.examples.iter().map(|e| e.tokens.as_slice()), &init.config)?;
    check_tokens(dev.examples.iter().map(|e| e.tokens.as_slice()), &init.config)?;

    let model = run_model_config(init, config);
    let root = RngStream::root(config.seed);
    let mut params = init.params.clone();
    reinit_classifier(&mut params, &root.split("classifier"))?;

    let per_epoch = config.iterations_per_epoch(train.len());
    let planned = config.total_iterations_for(train.len());
    let mut stepper = Stepper {
        config,
        schedule: config.schedule_for(planned),
        state: AdamState::new(&params),
    };
    stepper.schedule.validate()?;
    let baseline = constant_baseline(dev, train.majority_label()?)?;
    let mut trace = Trace::new(planned);
    let mut dropout = root.split("dropout");
    let mut diverged = false;
    let mut last = evaluate_classifier(&params, &model, dev)?;
    trace.eval(0, last.metric);

    let mut order: Vec<usize> = Vec::new();
    'outer: for t in 1..=planned {
        let pos = ((t - 1) % per_epoch) as usize * config.batch_size;
        if pos == 0 {
            order = (0..train.len()).collect();
            root.split("shuffle")
                .split_index("epoch", (t - 1) / per_epoch)
                .shuffle(&mut order);
        }
        let idx = &order[pos..(pos + config.batch_size).min(train.len())];
        let (tokens, labels) = train.batch(idx)?;
        let mut tape = Tape::new();
        let (loss, _) = classify_graph(&mut tape, &params, &model, &tokens, &labels, Mode::Train, Some(&mut dropout))?;
        let loss_value = tape.value(loss).item() as f64;
        let grads = if loss_value.is_finite() {
            tape.backward(loss)?
        } else {
            params.zeros_like()
        };
        drop(tape);
        if let StepOutcome::Diverged = stepper.step(&mut params, grads, loss_value, &mut trace)? {
            diverged = true;
            break 'outer;
        }
        if t % config.eval_every == 0 || t == planned {
            last = evaluate_classifier(&params, &model, dev)?;
            trace.eval(t, last.metric);
        }
    }

    let final_metric = last.metric;
    let failed = diverged || classify_failed_run(final_metric, baseline);
    let failure_reason = if diverged {
        Some("divergence".to_string())
    } else if failed {
        Some("baseline".to_string())
    } else {
        None
    };
    let dev_correct = last
        .predictions
        .iter()
        .zip(dev.labels())
        .map(|(p, l)| *p == l)
        .collect();
    let record = RunRecord {
        kind: RunKind::Finetune,
        config: config.clone(),
        metric: Some(dev.metric),
        planned_iterations: planned,
        final_train_loss: trace.last_epoch_loss(per_epoch),
        losses: trace.losses,
        lrs: trace.lrs,
        factors: trace.factors,
        grad_norms: trace.grad_norms,
        evals: trace.evals,
        final_metric,
        baseline,
        failed,
        failure_reason,
        dev_correct,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let ck = Checkpoint::new(init.config, params, format!("finetune seed={}", config.seed))?;
    Ok((record, ck))
}

/// Masked-LM pre-training on `corpus`, tracking perplexity on `heldout`.
pub fn run_pretrain(
    config: &RunConfig,
    corpus: &Corpus,
    heldout: &Corpus,
    init: &Checkpoint,
) -> Result<(RunRecord, Checkpoint)> {
    let started = std::time::Instant::now();
    config.validate()?;
    init.validate()?;
    if corpus.sequences.is_empty() || heldout.sequences.is_empty() {
        return Err(LabError::invalid("pre-training needs non-empty corpora"));
    }
    if corpus.vocab_size != init.config.vocab_size {
        return Err(LabError::ConfigMismatch(format!(
            "corpus vocab {} vs model vocab {}",
            corpus.vocab_size, init.config.vocab_size
        )));
    }
    check_tokens(corpus.sequences.iter().map(Vec::as_slice), &init.config)?;
    check_tokens(heldout.sequences.iter().map(Vec::as_slice), &init.config)?;

    let model = run_model_config(init, config);
    let root = RngStream::root(config.seed);
    let mut params = init.params.clone();
    let n = corpus.sequences.len();
    let per_epoch = config.iterations_per_epoch(n);
    let planned = config.total_iterations_for(n);
    let mut stepper = Stepper {
        config,
        schedule: config.schedule_for(planned),
        state: AdamState::new(&params),
    };
    stepper.schedule.validate()?;
    let eval_seed = root.split("heldout-mask").next_u64();
    let mut trace = Trace::new(planned);
    let mut dropout = root.split("dropout");
    let mut masking = root.split("masking");
    let mut diverged = false;
    let mut last = heldout_perplexity(&params, &model, heldout, &config.mask, eval_seed)?;
    trace.eval(0, last);

    let mut order: Vec<usize> = Vec::new();
    for t in 1..=planned {
        let pos = ((t - 1) % per_epoch) as usize * config.batch_size;
        if pos == 0 {
            order = (0..n).collect();
            root.split("shuffle")
                .split_index("epoch", (t - 1) / per_epoch)
                .shuffle(&mut order);
        }
        let rows: Vec<&[usize]> = order[pos..(pos + config.batch_size).min(n)]
            .iter()
            .map(|&i| corpus.sequences[i].as_slice())
            .collect();
        let batch = mlm_batch(&rows, &mut masking, &config.mask, model.vocab_size)?;
        let mut tape = Tape::new();
        let loss = mlm_graph(&mut tape, &params, &model, &batch, Mode::Train, Some(&mut dropout))?;
        let loss_value = tape.value(loss).item() as f64;
        let grads = if loss_value.is_finite() {
            tape.backward(loss)?
        } else {
            params.zeros_like()
        };
        drop(tape);
        if let StepOutcome::Diverged = stepper.step(&mut params, grads, loss_value, &mut trace)? {
            diverged = true;
            break;
        }
        if t % config.eval_every == 0 || t == planned {
            last = heldout_perplexity(&params, &model, heldout, &config.mask, eval_seed)?;
            trace.eval(t, last);
        }
    }

    let record = RunRecord {
        kind: RunKind::Pretrain,
        config: config.clone(),
        metric: None,
        planned_iterations: planned,
        final_train_loss: trace.last_epoch_loss(per_epoch),
        losses: trace.losses,
        lrs: trace.lrs,
        factors: trace.factors,
        grad_norms: trace.grad_norms,
        evals: trace.evals,
        final_metric: last,
        baseline: f64::NAN,
        failed: diverged,
        failure_reason: diverged.then(|| "divergence".to_string()),
        dev_correct: Vec::new(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let ck = Checkpoint::new(init.config, params, format!("pretrain seed={}", config.seed))?;
    Ok((record, ck))
}

fn check_tokens<'a>(rows: impl Iterator<Item = &'a [usize]>, config: &ModelConfig) -> Result<()> {
    for row in rows {
        if row.len() > config.max_seq_len {
            return Err(LabError::ConfigMismatch(format!(
                "sequence length {} exceeds max_seq_len {}",
                row.len(),
                config.max_seq_len
            )));
        }
        if let Some(&t) = row.iter().find(|&&t| t >= config.vocab_size) {
            return Err(LabError::ConfigMismatch(format!(
                "token {t} outside vocabulary of {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}
