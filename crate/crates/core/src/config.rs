//! Experiment configuration: one TOML document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{
    downsample, generate_classification_task, generate_corpus, Corpus, GrammarSpec, MaskPolicy, TaskDataset,
    TaskSpec,
};
use crate::error::{LabError, Result};
use crate::metrics::MetricKind;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::rng::RngStream;
use crate::train::{Granularity, RunConfig, ScheduleSpec};

pub const OUT_ROOT_ENV: &str = "FTLAB_OUT_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every stream in an experiment is split from it.
    pub seed: u64,
    pub output: OutputSection,
    pub model: ModelConfig,
    pub data: DataSection,
    pub optim: AdamConfig,
    pub schedule: ScheduleSpec,
    pub run: RunSection,
    pub pretrain: PretrainSection,
    pub sweep: SweepSection,
    pub surface: SurfaceSection,
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub grammar: GrammarSpec,
    pub train_size: usize,
    pub dev_size: usize,
    pub majority_fraction: f64,
    pub metric: MetricKind,
    /// Keep only this many training examples (drawn without replacement).
    pub downsample: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            grammar: t.grammar,
            train_size: t.train_size,
            dev_size: t.dev_size,
            majority_fraction: t.majority_fraction,
            metric: t.metric,
            downsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Exactly one of `epochs` and `total_iterations` is non-zero.
    pub epochs: u64,
    pub total_iterations: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub dropout: Option<f64>,
    pub norm_granularity: Granularity,
    /// Checkpoint to fine-tune from; a fresh initialisation when absent.
    pub init: Option<PathBuf>,
    /// Seed of a single fine-tuning run; the root seed when absent.
    pub seed: Option<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            epochs: r.epochs.unwrap_or(0),
            total_iterations: r.total_iterations.unwrap_or(0),
            batch_size: r.batch_size,
            eval_every: r.eval_every,
            dropout: r.dropout,
            norm_granularity: r.norm_granularity,
            init: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub total_iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub bias_correction: bool,
    pub warmup_ratio: f64,
    pub eval_every: u64,
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub mask: MaskPolicy,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            total_iterations: 1500,
            batch_size: 32,
            lr: 2e-3,
            bias_correction: true,
            warmup_ratio: 0.1,
            eval_every: 100,
            corpus_size: 4000,
            heldout_size: 200,
            mask: MaskPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub id: String,
    /// Dotted config paths and the values they take in this cell.
    pub set: IndexMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Name of a bundled plan; its cells come before any listed here.
    pub plan: Option<String>,
    pub cells: Vec<CellSpec>,
    pub axes: Vec<AxisSpec>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            plan: None,
            cells: Vec::new(),
            axes: Vec::new(),
            seeds: (0..25).collect(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceQuantity {
    Loss,
    GradientNorm,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSection {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub second: Option<PathBuf>,
    pub range: [f64; 2],
    pub resolution: usize,
    pub batch_size: usize,
    pub quantity: SurfaceQuantity,
    /// Seed of the classifier head standing in for the pre-trained model's.
    pub classifier_seed: u64,
    pub contour_levels: usize,
}

impl Default for SurfaceSection {
    fn default() -> Self {
        Self {
            pretrained: None,
            finetuned: None,
            second: None,
            range: [-1.5, 1.5],
            resolution: 40,
            batch_size: 128,
            quantity: SurfaceQuantity::Both,
            classifier_seed: 0,
            contour_levels: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    /// Run directory whose record is checked for the failure signature.
    pub run: Option<PathBuf>,
    pub eval_size: usize,
    pub mask_seed: u64,
    pub band: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            pretrained: None,
            finetuned: None,
            run: None,
            eval_size: 256,
            mask_seed: 0,
            band: 0.05,
        }
    }
}

/// Seed for one labelled purpose, split from `root`. Kept to 63 bits so it
/// fits a TOML integer.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    RngStream::root(root).split(label).next_u64() >> 1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let g = &self.data.grammar;
        if g.vocab_size != self.model.vocab_size {
            return Err(LabError::ConfigMismatch(format!(
                "data.grammar.vocab_size {} != model.vocab_size {}",
                g.vocab_size, self.model.vocab_size
            )));
        }
        if g.seq_len > self.model.max_seq_len {
            return Err(LabError::ConfigMismatch(format!(
                "data.grammar.seq_len {} exceeds model.max_seq_len {}",
                g.seq_len, self.model.max_seq_len
            )));
        }
        self.task_spec().validate()?;
        if let Some(n) = self.data.downsample {
            if n == 0 || n > self.data.train_size {
                return Err(LabError::invalid(format!(
                    "data.downsample {n} outside 1..={}",
                    self.data.train_size
                )));
            }
        }
        self.run_config(self.seed).validate()?;
        self.pretrain_config().validate()?;
        if self.surface.resolution < 2 {
            return Err(LabError::invalid("surface.resolution must be >= 2"));
        }
        if !(self.surface.range[0] < self.surface.range[1]) {
            return Err(LabError::invalid("surface.range must be increasing"));
        }
        if self.sweep.workers == 0 {
            return Err(LabError::invalid("sweep.workers must be >= 1"));
        }
        Ok(())
    }

    /// Every configured input file must exist.
    pub fn check_paths(&self) -> Result<()> {
        let s = &self.surface;
        let p = &self.probe;
        for path in [&self.run.init, &s.pretrained, &s.finetuned, &s.second, &p.pretrained, &p.finetuned, &p.run]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(LabError::MissingArtifact(path.clone()));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            grammar: self.data.grammar.clone(),
            train_size: self.data.train_size,
            dev_size: self.data.dev_size,
            num_classes: self.model.num_classes,
            majority_fraction: self.data.majority_fraction,
            metric: self.data.metric,
        }
    }

    /// Train and dev splits, downsampled when configured.
    pub fn datasets(&self) -> Result<(TaskDataset, TaskDataset)> {
        let (train, dev) = generate_classification_task(&self.task_spec(), derive_seed(self.seed, "task"))?;
        let train = match self.data.downsample {
            Some(n) => downsample(&train, n, derive_seed(self.seed, "downsample"))?,
            None => train,
        };
        Ok((train, dev))
    }

    /// Pre-training corpus and a disjoint held-out slice.
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let p = &self.pretrain;
        let mut corpus = generate_corpus(
            &self.data.grammar,
            derive_seed(self.seed, "corpus"),
            p.corpus_size + p.heldout_size,
        )?;
        let heldout = corpus.split_off(p.heldout_size)?;
        Ok((corpus, heldout))
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            epochs: (self.run.epochs > 0).then_some(self.run.epochs),
            total_iterations: (self.run.total_iterations > 0).then_some(self.run.total_iterations),
            batch_size: self.run.batch_size,
            eval_every: self.run.eval_every,
            adam: self.optim.clone(),
            schedule: self.schedule,
            dropout: self.run.dropout,
            norm_granularity: self.run.norm_granularity,
            mask: self.pretrain.mask,
        }
    }

    pub fn pretrain_config(&self) -> RunConfig {
        let p = &self.pretrain;
        RunConfig {
            seed: derive_seed(self.seed, "pretrain"),
            epochs: None,
            total_iterations: Some(p.total_iterations),
            batch_size: p.batch_size,
            eval_every: p.eval_every,
            adam: AdamConfig {
                alpha: p.lr,
                bias_correction: p.bias_correction,
                ..AdamConfig::default()
            },
            schedule: ScheduleSpec {
                warmup_ratio: p.warmup_ratio,
                ..ScheduleSpec::default()
            },
            dropout: None,
            norm_granularity: Granularity::Layer,
            mask: p.mask,
        }
    }

    /// Output directory: `out` if given, else the environment root, else the config.
    pub fn output_dir(&self, out: Option<&Path>) -> PathBuf {
        if let Some(o) = out {
            return o.to_path_buf();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output.dir.clone(),
        }
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| LabError::invalid(format!("config serialisation: {e}")))
    }

    pub fn from_table(table: toml::Table, origin: &str) -> Result<Self> {
        // Re-parsing the text gives errors a span, from which the dotted path is recovered.
        let text = toml::to_string(&table).map_err(|e| LabError::invalid(format!("config serialisation: {e}")))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| LabError::Config {
            path: e
                .span()
                .and_then(|s| dotted_path_at(&text, s.start))
                .unwrap_or_else(|| origin.to_string()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Self::from_table(table, origin)
    }

    /// Loads `path` (or the defaults) and applies `path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut table, origin) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => LabError::MissingArtifact(p.to_path_buf()),
                    _ => LabError::io(p, e),
                })?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                (table, p.display().to_string())
            }
            None => (Self::default().to_table()?, "<defaults>".to_string()),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| LabError::invalid(format!("override {o:?} is not path=value")))?;
            set_dotted(&mut table, key.trim(), value.trim())?;
        }
        let cfg = Self::from_table(table, &origin)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Dotted `key = value` lines, each a valid TOML statement.
    pub fn to_dotted(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        flatten("", &toml::Value::Table(self.to_table()?), &mut out);
        Ok(out)
    }

    pub fn from_dotted<'a>(lines: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut text = String::new();
        for (k, v) in lines {
            text.push_str(&format!("{k} = {v}\n"));
        }
        Self::parse(&text, "<manifest>")
    }

    /// The same experiment with one dotted override applied.
    pub fn with(&self, path: &str, value: &toml::Value) -> Result<Self> {
        let mut table = self.to_table()?;
        set_value(&mut table, path, Some(value.clone()))?;
        Self::from_table(table, &format!("override {path}"))
    }
}

/// `section.key` of the statement containing byte `offset` of a TOML document.
fn dotted_path_at(text: &str, offset: usize) -> Option<String> {
    let before = &text[..offset.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split_once('=').map(|(k, _)| k.trim().trim_matches('"'));
    let section = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
        .map(|s| s.trim_matches(|c| c == '[' || c == ']').to_string());
    let header = line.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']'));
    match (header, key, section) {
        (Some(h), _, _) => Some(h.to_string()),
        (None, Some(k), Some(s)) => Some(format!("{s}.{k}")),
        (None, Some(k), None) => Some(k.to_string()),
        _ => None,
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) if !t.is_empty() || prefix.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parses `raw` as a TOML value (bare words become strings) and stores it at
/// `path`; an empty value removes the key.
pub fn set_dotted(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = if raw.is_empty() {
        None
    } else {
        let parsed: std::result::Result<toml::Table, _> = format!("v = {raw}").parse();
        Some(match parsed {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        })
    };
    set_value(table, path, value)
}

fn set_value(table: &mut toml::Table, path: &str, value: Option<toml::Value>) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::invalid(format!("malformed config path {path:?}")));
    }
    let (last, parents) = parts.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| LabError::Config {
            path: path.to_string(),
            message: format!("{p} is not a section"),
        })?;
    }
    match value {
        Some(v) => {
            cur.insert(last.to_string(), v);
        }
        None => {
            cur.remove(*last);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let lines = c.to_dotted().unwrap();
        let back = ExperimentConfig::from_dotted(lines.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let c = ExperimentConfig::load(None, &["run.batch_size=8".into(), "optim.bias_correction=false".into()]).unwrap();
        assert_eq!(c.run.batch_size, 8);
        assert!(!c.optim.bias_correction);
        let e = ExperimentConfig::load(None, &["run.bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::load(None, &["run.batch_size=\"many\"".into()]).unwrap_err();
        assert!(e.to_string().contains("run.batch_size") && e.to_string().contains("expected usize"), "{e}");
    }

    #[test]
    fn empty_override_removes_key() {
        let c = ExperimentConfig::load(None, &["run.epochs=0".into(), "run.total_iterations=40".into()]).unwrap();
        assert_eq!((c.run.epochs, c.run.total_iterations), (0, 40));
        let c = ExperimentConfig::load(None, &["surface.pretrained=\"x\"".into(), "surface.pretrained=".into()]).unwrap();
        assert_eq!(c.surface.pretrained, None);
        assert!(ExperimentConfig::load(None, &["run.total_iterations=40".into()]).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let e = ExperimentConfig::load(Some(Path::new("/nonexistent/x.toml")), &[]).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.toml"));
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let e = ExperimentConfig::load(None, &["model.vocab_size=64".into()]).unwrap_err();
        assert!(matches!(e, LabError::ConfigMismatch(_)), "{e}");
    }
}
