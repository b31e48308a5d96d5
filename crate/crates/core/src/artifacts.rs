//! On-disk artefacts: key-value manifests, CSV traces and run records.
//!
//! Manifests are UTF-8 text with one `key = value` statement per line, where
//! the value is a TOML literal; a manifest is therefore also a TOML document.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::metrics::MetricKind;
use crate::train::{EvalPoint, RunConfig, RunKind, RunRecord};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: IndexMap<String, toml::Value>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        let mut m = Self::default();
        m.set("kind", kind);
        m.set("tool.name", env!("CARGO_PKG_NAME"));
        m.set("tool.version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<toml::Value>) -> &mut Self {
        self.entries.insert(key.into(), value.into());
        self
    }

    pub fn set_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.set(key, toml::Value::Float(value))
    }

    pub fn set_u64(&mut self, key: impl Into<String>, value: u64) -> &mut Self {
        let v = i64::try_from(value).map_or_else(|_| toml::Value::String(value.to_string()), toml::Value::Integer);
        self.set(key, v)
    }

    /// Records `value` flattened under `prefix`.
    pub fn set_nested<T: Serialize>(&mut self, prefix: &str, value: &T) -> Result<&mut Self> {
        for (k, v) in flatten_value(value)? {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
        Ok(self)
    }

    /// Rebuilds a value recorded with [`Manifest::set_nested`].
    pub fn get_nested<T: DeserializeOwned>(&self, prefix: &str) -> Result<T> {
        let dotted = format!("{prefix}.");
        let mut text = String::new();
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix(&dotted) {
                text.push_str(&format!("{rest} = {v}\n"));
            }
        }
        toml::from_str(&text).map_err(|e| LabError::Format(format!("manifest section {prefix}: {}", e.message())))
    }

    pub fn get(&self, key: &str) -> Option<&toml::Value> {
        self.entries.get(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(toml::Value::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            toml::Value::Float(f) => Some(*f),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        match self.get(key)? {
            toml::Value::Integer(i) => u64::try_from(*i).ok(),
            toml::Value::String(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(toml::Value::as_bool)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| LabError::Format(format!("manifest line {}: expected `key = value`", n + 1)))?;
            let mut t: toml::Table = format!("v = {v}")
                .parse()
                .map_err(|e: toml::de::Error| LabError::Format(format!("manifest line {}: {}", n + 1, e.message())))?;
            m.entries.insert(k.to_string(), t.remove("v").expect("parsed key"));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_file(&path, self.render().as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::MissingArtifact(path.clone()),
            _ => LabError::io(&path, e),
        })?;
        Self::parse(&text)
    }
}

fn flatten_value<T: Serialize>(value: &T) -> Result<Vec<(String, toml::Value)>> {
    let v = toml::Value::try_from(value).map_err(|e| LabError::invalid(format!("serialisation: {e}")))?;
    let mut out = Vec::new();
    fn walk(prefix: &str, v: toml::Value, out: &mut Vec<(String, toml::Value)>) {
        match v {
            toml::Value::Table(t) if !t.is_empty() => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other)),
        }
    }
    walk("", v, &mut out);
    Ok(out)
}

/// Maps `s` onto characters allowed in a bare manifest key.
pub fn key_segment(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(crate::params::hex(&Sha256::digest(&bytes)))
}

/// A CSV table held in memory so it can be written in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let err = |e: csv::Error| LabError::Format(e.to_string());
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.into_inner().map_err(|e| LabError::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                LabError::MissingArtifact(path.to_path_buf())
            }
            _ => LabError::Format(format!("{}: {e}", path.display())),
        })?;
        let fmt = |e: csv::Error| LabError::Format(format!("{}: {e}", path.display()));
        let header = r.headers().map_err(fmt)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(fmt)?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Format(format!("missing CSV column {name:?}")))
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| LabError::Format(format!("not a number: {s:?}")))
}

pub const TRACE_FILES: [&str; 6] = [
    "loss.csv",
    "lr.csv",
    "bias_correction.csv",
    "grad_norms.csv",
    "eval.csv",
    "dev_correct.csv",
];

/// Writes a run as `manifest.txt` plus one CSV per trace family.
pub fn write_run(record: &RunRecord, dir: &Path) -> Result<Manifest> {
    ensure_dir(dir)?;
    let series = |name: &str, values: &[f64]| {
        let mut t = Table::new(["iteration", name]);
        for (i, v) in values.iter().enumerate() {
            t.push([(i + 1).to_string(), fmt_f64(*v)]);
        }
        t
    };
    series("loss", &record.losses).write(&dir.join("loss.csv"))?;
    series("lr", &record.lrs).write(&dir.join("lr.csv"))?;
    series("factor", &record.factors).write(&dir.join("bias_correction.csv"))?;

    let mut norms = Table::new(std::iter::once("iteration".to_string()).chain(record.grad_norms.keys().cloned()));
    for i in 0..record.losses.len() {
        norms.push(
            std::iter::once((i + 1).to_string())
                .chain(record.grad_norms.values().map(|s| fmt_f64(s[i]))),
        );
    }
    norms.write(&dir.join("grad_norms.csv"))?;

    let mut evals = Table::new(["iteration", "metric", "train_loss"]);
    for e in &record.evals {
        evals.push([e.iteration.to_string(), fmt_f64(e.metric), fmt_f64(e.train_loss)]);
    }
    evals.write(&dir.join("eval.csv"))?;

    let mut correct = Table::new(["point", "correct"]);
    for (i, c) in record.dev_correct.iter().enumerate() {
        correct.push([i.to_string(), u8::from(*c).to_string()]);
    }
    correct.write(&dir.join("dev_correct.csv"))?;

    let mut m = Manifest::new("run");
    m.set(
        "run.kind",
        match record.kind {
            RunKind::Finetune => "finetune",
            RunKind::Pretrain => "pretrain",
        },
    );
    m.set("run.metric", record.metric.map_or("perplexity", MetricKind::name));
    m.set_u64("run.planned_iterations", record.planned_iterations);
    m.set_u64("run.iterations", record.losses.len() as u64);
    m.set_f64("run.final_metric", record.final_metric);
    m.set_f64("run.final_train_loss", record.final_train_loss);
    m.set_f64("run.baseline", record.baseline);
    m.set("run.failed", record.failed);
    m.set("run.failure_reason", record.failure_reason.clone().unwrap_or_default());
    m.set_nested("config", &record.config)?;
    for f in TRACE_FILES {
        m.set(format!("output.{f}.sha256"), sha256_file(&dir.join(f))?);
    }
    m.write(dir)?;
    Ok(m)
}

fn read_series(path: &Path) -> Result<Vec<f64>> {
    let t = Table::read(path)?;
    t.rows.iter().map(|r| parse_f64(&r[1])).collect()
}

/// Reads a run directory written by [`write_run`]; wall time is not stored.
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let m = Manifest::read(dir)?;
    let missing = |k: &str| LabError::Format(format!("{}: missing {k}", dir.display()));
    let kind = match m.get_str("run.kind") {
        Some("finetune") => RunKind::Finetune,
        Some("pretrain") => RunKind::Pretrain,
        _ => return Err(missing("run.kind")),
    };
    let metric = match m.get_str("run.metric").ok_or_else(|| missing("run.metric"))? {
        "perplexity" => None,
        other => Some(MetricKind::parse(other)?),
    };
    let config: RunConfig = m.get_nested("config")?;

    let norms = Table::read(&dir.join("grad_norms.csv"))?;
    let mut grad_norms = IndexMap::new();
    for (c, name) in norms.header.iter().enumerate().skip(1) {
        let col = norms.rows.iter().map(|r| parse_f64(&r[c])).collect::<Result<Vec<_>>>()?;
        grad_norms.insert(name.clone(), col);
    }
    let evals = Table::read(&dir.join("eval.csv"))?
        .rows
        .iter()
        .map(|r| {
            Ok(EvalPoint {
                iteration: r[0].parse().map_err(|_| LabError::Format("eval iteration".into()))?,
                metric: parse_f64(&r[1])?,
                train_loss: parse_f64(&r[2])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dev_correct = Table::read(&dir.join("dev_correct.csv"))?
        .rows
        .iter()
        .map(|r| r[1] == "1")
        .collect();
    let reason = m.get_str("run.failure_reason").unwrap_or_default();
    Ok(RunRecord {
        kind,
        config,
        metric,
        planned_iterations: m.get_u64("run.planned_iterations").ok_or_else(|| missing("run.planned_iterations"))?,
        losses: read_series(&dir.join("loss.csv"))?,
        lrs: read_series(&dir.join("lr.csv"))?,
        factors: read_series(&dir.join("bias_correction.csv"))?,
        grad_norms,
        evals,
        final_metric: m.get_f64("run.final_metric").ok_or_else(|| missing("run.final_metric"))?,
        final_train_loss: m.get_f64("run.final_train_loss").ok_or_else(|| missing("run.final_train_loss"))?,
        baseline: m.get_f64("run.baseline").ok_or_else(|| missing("run.baseline"))?,
        failed: m.get_bool("run.failed").ok_or_else(|| missing("run.failed"))?,
        failure_reason: (!reason.is_empty()).then(|| reason.to_string()),
        dev_correct,
        wall_time_secs: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new("test");
        m.set_f64("x", 0.1).set_u64("n", u64::MAX).set("flag", true).set_f64("nan", f64::NAN);
        m.set_nested("cfg", &RunConfig::default()).unwrap();
        let back = Manifest::parse(&m.render()).unwrap();
        assert_eq!(back.render(), m.render());
        assert_eq!(back.get_u64("n"), Some(u64::MAX));
        assert_eq!(back.get_f64("x"), Some(0.1));
        let cfg: RunConfig = back.get_nested("cfg").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(m.render().parse::<toml::Table>().is_ok());
    }

    #[test]
    fn csv_quotes_awkward_ids() {
        let mut t = Table::new(["cell", "v"]);
        t.push(["a=1,b=2", "0.5"]);
        assert_eq!(String::from_utf8(t.to_bytes().unwrap()).unwrap(), "cell,v\n\"a=1,b=2\",0.5\n");
    }
}
