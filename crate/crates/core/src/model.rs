//! A small BERT-shaped encoder: learned token and position embeddings,
//! post-norm self-attention blocks, a tanh pooler with a classifier, and a
//! masked-LM head tied to the token embedding.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LabError, Result};
use crate::params::{CheckpointFile, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 256,
            max_seq_len: 32,
            dropout_p: 0.1,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LabError::invalid(format!("model.{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(LabError::invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(LabError::invalid(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let mut out = vec![
            ("embeddings.token.weight".to_string(), vec![v, d]),
            ("embeddings.position.weight".to_string(), vec![self.max_seq_len, d]),
            ("embeddings.ln.gain".to_string(), vec![d]),
            ("embeddings.ln.offset".to_string(), vec![d]),
        ];
        for i in 0..self.num_layers {
            for m in ["query", "key", "value", "output.dense"] {
                out.push((format!("layer{i}.attention.{m}.weight"), vec![d, d]));
                out.push((format!("layer{i}.attention.{m}.bias"), vec![d]));
            }
            out.push((format!("layer{i}.ln1.gain"), vec![d]));
            out.push((format!("layer{i}.ln1.offset"), vec![d]));
            out.push((format!("layer{i}.ffn.in.weight"), vec![d, f]));
            out.push((format!("layer{i}.ffn.in.bias"), vec![f]));
            out.push((format!("layer{i}.ffn.out.weight"), vec![f, d]));
            out.push((format!("layer{i}.ffn.out.bias"), vec![d]));
            out.push((format!("layer{i}.ln2.gain"), vec![d]));
            out.push((format!("layer{i}.ln2.offset"), vec![d]));
        }
        out.push(("pooler.weight".to_string(), vec![d, d]));
        out.push(("pooler.bias".to_string(), vec![d]));
        out.push(("classifier.weight".to_string(), vec![d, self.num_classes]));
        out.push(("classifier.bias".to_string(), vec![self.num_classes]));
        out.push(("mlm_head.bias".to_string(), vec![v]));
        out
    }

    pub fn to_header(&self) -> IndexMap<String, String> {
        let mut h = IndexMap::new();
        h.insert("model.num_layers".into(), self.num_layers.to_string());
        h.insert("model.hidden_dim".into(), self.hidden_dim.to_string());
        h.insert("model.num_heads".into(), self.num_heads.to_string());
        h.insert("model.ffn_dim".into(), self.ffn_dim.to_string());
        h.insert("model.vocab_size".into(), self.vocab_size.to_string());
        h.insert("model.max_seq_len".into(), self.max_seq_len.to_string());
        h.insert("model.dropout_p".into(), self.dropout_p.to_string());
        h.insert("model.num_classes".into(), self.num_classes.to_string());
        h
    }

    pub fn from_header(h: &IndexMap<String, String>) -> Result<Self> {
        fn field<V: std::str::FromStr>(h: &IndexMap<String, String>, key: &str) -> Result<V> {
            h.get(key)
                .ok_or_else(|| LabError::Format(format!("header missing `{key}`")))?
                .parse()
                .map_err(|_| LabError::Format(format!("header `{key}` unparsable")))
        }
        let cfg = Self {
            num_layers: field(h, "model.num_layers")?,
            hidden_dim: field(h, "model.hidden_dim")?,
            num_heads: field(h, "model.num_heads")?,
            ffn_dim: field(h, "model.ffn_dim")?,
            vocab_size: field(h, "model.vocab_size")?,
            max_seq_len: field(h, "model.max_seq_len")?,
            dropout_p: field(h, "model.dropout_p")?,
            num_classes: field(h, "model.num_classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which layer a parameter belongs to, if any.
pub fn layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

fn init_value(name: &str, shape: &[usize], rng: &RngStream) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    if is_weight(name) {
        let mut r = rng.split(name);
        let data = (0..n)
            .map(|_| r.truncated_normal(INIT_STD, 2.0) as f32)
            .collect();
        Tensor::new(shape.to_vec(), data)
    } else if name.ends_with(".gain") {
        Tensor::full(shape, 1.0)
    } else {
        Tensor::zeros(shape)
    }
}

/// Weights from a truncated normal (std 0.02, cut at 2 std), biases and
/// layer-norm offsets zero, gains one. Each tensor draws from its own
/// name-labeled stream, so initialization is independent of layout order.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    config.validate()?;
    let rng = RngStream::root(seed).split("init");
    let mut params = ParamStore::new();
    for (name, shape) in config.param_layout() {
        let t = init_value(&name, &shape, &rng);
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Re-draws the task head (`classifier.*`) from a fresh stream.
pub fn reinit_classifier(params: &mut ParamStore<f32>, rng: &RngStream) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = params
        .iter()
        .filter(|(n, _)| n.starts_with("classifier."))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let t = init_value(&name, &shape, rng);
        params.set(&name, t)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Token ids for `batch` sequences of equal length, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows<'r>(rows: impl IntoIterator<Item = &'r [usize]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut seq_len = None;
        for row in rows {
            match seq_len {
                None => seq_len = Some(row.len()),
                Some(s) if s != row.len() => {
                    return Err(LabError::shape(
                        "token_batch",
                        format!("ragged rows: {s} vs {}", row.len()),
                    ))
                }
                _ => {}
            }
            ids.extend_from_slice(row);
            batch += 1;
        }
        let seq_len = seq_len.unwrap_or(0);
        if batch == 0 || seq_len == 0 {
            return Err(LabError::invalid("empty token batch"));
        }
        Ok(Self { batch, seq_len, ids })
    }
}

/// Masked-LM batch: the masked input plus flat positions (`row * seq_len + col`)
/// and their original tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub input: TokenBatch,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

struct Encoder<'p, T: Real> {
    params: &'p ParamStore<T>,
    config: ModelConfig,
}

impl<'p, T: Real> Encoder<'p, T> {
    fn p(&self, tape: &mut Tape<'p, T>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.params.require(name)?))
    }

    fn linear(&self, tape: &mut Tape<'p, T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.weight"))?;
        let b = self.p(tape, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w, false)?;
        tape.add_bias(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<'p, T>, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.gain"))?;
        let o = self.p(tape, &format!("{prefix}.offset"))?;
        tape.layer_norm(x, g, o)
    }

    fn dropout(
        &self,
        tape: &mut Tape<'p, T>,
        x: Var,
        mode: Mode,
        rng: &mut Option<&mut RngStream>,
    ) -> Result<Var> {
        match (mode, rng) {
            (Mode::Train, Some(r)) => tape.dropout(x, self.config.dropout_p, r),
            (Mode::Train, None) if self.config.dropout_p > 0.0 => {
                Err(LabError::invalid("train-mode dropout requires an RNG stream"))
            }
            _ => Ok(x),
        }
    }

    /// Hidden states `[batch * seq_len, hidden]`.
    fn encode(
        &self,
        tape: &mut Tape<'p, T>,
        tokens: &TokenBatch,
        mode: Mode,
        rng: &mut Option<&mut RngStream>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, s, d) = (tokens.batch, tokens.seq_len, cfg.hidden_dim);
        if s > cfg.max_seq_len {
            return Err(LabError::invalid(format!(
                "sequence length {s} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(LabError::invalid(format!(
                "token id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        let tok_table = self.p(tape, "embeddings.token.weight")?;
        let pos_table = self.p(tape, "embeddings.position.weight")?;
        let tok = tape.embedding(tok_table, &tokens.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = self.layer_norm(tape, x, "embeddings.ln")?;
        x = self.dropout(tape, x, mode, rng)?;

        let h = cfg.num_heads;
        let dh = cfg.head_dim();
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        for i in 0..cfg.num_layers {
            let pre = format!("layer{i}");
            let split = |tape: &mut Tape<'p, T>, v: Var| -> Result<Var> {
                let v = tape.reshape(v, &[b, s, h, dh])?;
                let v = tape.swap_axes12(v)?;
                tape.reshape(v, &[b * h, s, dh])
            };
            let q = self.linear(tape, x, &format!("{pre}.attention.query"))?;
            let k = self.linear(tape, x, &format!("{pre}.attention.key"))?;
            let v = self.linear(tape, x, &format!("{pre}.attention.value"))?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let probs = tape.softmax(scores)?;
            let probs = self.dropout(tape, probs, mode, rng)?;
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
            let ctx = tape.swap_axes12(ctx)?;
            let ctx = tape.reshape(ctx, &[b * s, d])?;
            let attn = self.linear(tape, ctx, &format!("{pre}.attention.output.dense"))?;
            let attn = self.dropout(tape, attn, mode, rng)?;
            let res = tape.add(x, attn)?;
            x = self.layer_norm(tape, res, &format!("{pre}.ln1"))?;

            let f = self.linear(tape, x, &format!("{pre}.ffn.in"))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, &format!("{pre}.ffn.out"))?;
            let f = self.dropout(tape, f, mode, rng)?;
            let res = tape.add(x, f)?;
            x = self.layer_norm(tape, res, &format!("{pre}.ln2"))?;
        }
        Ok(x)
    }
}

/// Builds the classification graph on `tape`; returns `(loss, logits)`.
pub fn classify_graph<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    params: &'p ParamStore<T>,
    config: &ModelConfig,
    tokens: &TokenBatch,
    labels: &[usize],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<(Var, Var)> {
    if labels.len() != tokens.batch {
        return Err(LabError::shape(
            "forward_classify",
            format!("{} labels for batch {}", labels.len(), tokens.batch),
        ));
    }
    let enc = Encoder { params, config: *config };
    let mut rng = rng;
    let hidden = enc.encode(tape, tokens, mode, &mut rng)?;
    let first: Vec<usize> = (0..tokens.batch).map(|i| i * tokens.seq_len).collect();
    let cls = tape.gather_rows(hidden, &first)?;
    let pooled = enc.linear(tape, cls, "pooler")?;
    let pooled = tape.tanh(pooled)?;
    let pooled = enc.dropout(tape, pooled, mode, &mut rng)?;
    let logits = enc.linear(tape, pooled, "classifier")?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok((loss, logits))
}

/// Builds the masked-LM graph; returns the mean cross-entropy over masked
/// positions.
pub fn mlm_graph<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    params: &'p ParamStore<T>,
    config: &ModelConfig,
    batch: &MlmBatch,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    if batch.positions.is_empty() {
        return Err(LabError::invalid("forward_mlm: no masked positions"));
    }
    if batch.positions.len() != batch.targets.len() {
        return Err(LabError::shape(
            "forward_mlm",
            format!("{} positions vs {} targets", batch.positions.len(), batch.targets.len()),
        ));
    }
    let enc = Encoder { params, config: *config };
    let mut rng = rng;
    let hidden = enc.encode(tape, &batch.input, mode, &mut rng)?;
    let picked = tape.gather_rows(hidden, &batch.positions)?;
    let table = enc.p(tape, "embeddings.token.weight")?;
    let bias = enc.p(tape, "mlm_head.bias")?;
    let logits = tape.matmul(picked, table, true)?;
    let logits = tape.add_bias(logits, bias)?;
    tape.cross_entropy(logits, &batch.targets)
}

#[derive(Debug, Clone)]
pub struct ClassifyOutput<T: Real = f32> {
    pub loss: f64,
    pub logits: Tensor<T>,
    pub correct: usize,
    pub predictions: Vec<usize>,
}

/// Forward pass for classification: mean cross-entropy, logits
/// `[batch, num_classes]` and the number of correct argmax predictions.
pub fn forward_classify<T: Real>(
    params: &ParamStore<T>,
    config: &ModelConfig,
    tokens: &TokenBatch,
    labels: &[usize],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<ClassifyOutput<T>> {
    let mut tape = Tape::inference();
    let (loss, logits) = classify_graph(&mut tape, params, config, tokens, labels, mode, rng)?;
    let logits = tape.value(logits).clone();
    let predictions = argmax_rows(&logits);
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ClassifyOutput {
        loss: tape.value(loss).item().as_f64(),
        logits,
        correct,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmOutput {
    pub loss: f64,
    pub perplexity: f64,
}

pub fn forward_mlm<T: Real>(
    params: &ParamStore<T>,
    config: &ModelConfig,
    batch: &MlmBatch,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<MlmOutput> {
    let mut tape = Tape::inference();
    let loss = mlm_graph(&mut tape, params, config, batch, mode, rng)?;
    let loss = tape.value(loss).item().as_f64();
    Ok(MlmOutput {
        loss,
        perplexity: loss.exp(),
    })
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Model configuration, parameters and a free-text provenance label.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub provenance: String,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>, provenance: impl Into<String>) -> Result<Self> {
        let ck = Self {
            config,
            params,
            provenance: provenance.into(),
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, init_params(&config, seed)?, format!("init-seed{seed}"))
    }

    /// Parameter names and shapes must match the layout implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.param_layout();
        if layout.len() != self.params.len() {
            return Err(LabError::ConfigMismatch(format!(
                "config implies {} tensors, checkpoint has {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(self.params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(LabError::ConfigMismatch(format!(
                    "expected {name} {shape:?}, found {pname} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> CheckpointFile {
        let mut header = self.config.to_header();
        header.insert("provenance".into(), self.provenance.replace('\n', " "));
        CheckpointFile {
            header,
            tensors: self.params.clone(),
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Self> {
        let config = ModelConfig::from_header(&file.header)?;
        let provenance = file.header.get("provenance").cloned().unwrap_or_default();
        // Optimizer state (reserved prefix) may ride along; keep model tensors only.
        let mut params = ParamStore::new();
        for (name, t) in file.tensors.iter() {
            if !name.starts_with(crate::optim::STATE_PREFIX) {
                params.insert(name, t.clone())?;
            }
        }
        Self::new(config, params, provenance)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_file(CheckpointFile::load(path)?)
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }
}

/// Hybrid checkpoint whose top `k` encoder layers come from `pre_trained`
/// and everything else from `fine_tuned`. With `k == num_layers` the
/// embeddings and the masked-LM head are restored as well, so the hybrid's
/// masked-LM behaviour equals the pre-trained model's. Task heads (pooler,
/// classifier) always stay fine-tuned.
pub fn substitute_top_layers(
    fine_tuned: &Checkpoint,
    pre_trained: &Checkpoint,
    k: usize,
) -> Result<Checkpoint> {
    if fine_tuned.config != pre_trained.config {
        return Err(LabError::ConfigMismatch(
            "substitute_top_layers: checkpoints have different model configs".into(),
        ));
    }
    let layers = fine_tuned.config.num_layers;
    if k > layers {
        return Err(LabError::invalid(format!(
            "substitute_top_layers: k={k} outside 0..={layers}"
        )));
    }
    let mut params = fine_tuned.params.clone();
    let full = k == layers;
    for (name, t) in pre_trained.params.iter() {
        let take = match layer_index(name) {
            Some(i) => i >= layers - k,
            None => {
                full && (name.starts_with("embeddings.") || name.starts_with("mlm_head."))
            }
        };
        if take {
            params.set(name, t.clone())?;
        }
    }
    Checkpoint::new(
        fine_tuned.config,
        params,
        format!("{}+top{k}<-{}", fine_tuned.provenance, pre_trained.provenance),
    )
}
