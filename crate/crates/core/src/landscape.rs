//! Loss and gradient-norm surfaces over the plane through a pre-trained
//! model spanned by `d1 = f - p` and `d2 = s - p`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{ensure_dir, fmt_f64, sha256_file, write_file, Manifest, Table};
use crate::autodiff::Tape;
use crate::data::TaskDataset;
use crate::error::{LabError, Result};
use crate::model::{classify_graph, forward_classify, reinit_classifier, Checkpoint, Mode, ModelConfig, TokenBatch};
use crate::params::{hex, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    Loss,
    GradientNorm,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Loss => "loss",
            Quantity::GradientNorm => "gradient-norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub range: [f64; 2],
    pub resolution: usize,
    pub batch_size: usize,
    pub classifier_seed: u64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            range: [-1.5, 1.5],
            resolution: 40,
            batch_size: 128,
            classifier_seed: 0,
        }
    }
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(LabError::invalid("surface resolution must be >= 2"));
        }
        let [lo, hi] = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(LabError::invalid(format!("surface range [{lo}, {hi}] is empty")));
        }
        if self.batch_size == 0 {
            return Err(LabError::invalid("surface batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Uniform points including both endpoints.
    pub fn axis(&self) -> Vec<f64> {
        let [lo, hi] = self.range;
        let n = self.resolution - 1;
        (0..=n)
            .map(|i| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 })
            .collect()
    }
}

/// Fixed evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
}

impl EvalBatch {
    /// The first `n` examples of a seeded permutation of `dataset`.
    pub fn sample(dataset: &TaskDataset, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > dataset.len() {
            return Err(LabError::invalid(format!(
                "evaluation batch of {n} from {} examples",
                dataset.len()
            )));
        }
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        RngStream::root(seed).split("surface-batch").shuffle(&mut idx);
        idx.truncate(n);
        let (tokens, labels) = dataset.batch(&idx)?;
        Ok(Self { tokens, labels })
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.tokens.batch, self.tokens.seq_len].iter().chain(&self.tokens.ids).chain(&self.labels) {
            h.update((*v as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Mean cross-entropy of `params` on `batch`, dropout off.
pub fn batch_loss(params: &ParamStore<f32>, config: &ModelConfig, batch: &EvalBatch) -> Result<f64> {
    Ok(forward_classify(params, config, &batch.tokens, &batch.labels, Mode::Eval, None)?.loss)
}

/// Global L2 norm of the full parameter gradient on `batch`, dropout off.
pub fn batch_gradient_norm(params: &ParamStore<f32>, config: &ModelConfig, batch: &EvalBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = classify_graph(&mut tape, params, config, &batch.tokens, &batch.labels, Mode::Eval, None)?;
    Ok(tape.backward(loss)?.global_norm())
}

/// The three anchor checkpoints and the plane through them.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub config: ModelConfig,
    pub pretrained: ParamStore<f32>,
    pub finetuned: ParamStore<f32>,
    pub second: ParamStore<f32>,
}

impl Subspace {
    /// Replaces the pre-trained classifier head with a pinned initialization
    /// drawn from `classifier_seed`. Inputs are not modified.
    pub fn new(pretrained: &Checkpoint, finetuned: &Checkpoint, second: &Checkpoint, classifier_seed: u64) -> Result<Self> {
        if pretrained.config != finetuned.config || pretrained.config != second.config {
            return Err(LabError::ConfigMismatch(
                "surface checkpoints have different model configs".into(),
            ));
        }
        for c in [pretrained, finetuned, second] {
            c.validate()?;
        }
        let mut p = pretrained.params.clone();
        reinit_classifier(&mut p, &pinned_classifier_stream(classifier_seed))?;
        Ok(Self {
            config: pretrained.config,
            pretrained: p,
            finetuned: finetuned.params.clone(),
            second: second.params.clone(),
        })
    }

    /// `p + a (f - p) + b (s - p)`, accumulated in f64 per coordinate.
    pub fn point(&self, a: f64, b: f64) -> Result<ParamStore<f32>> {
        let mut out = ParamStore::new();
        for (name, p) in self.pretrained.iter() {
            let f = self.finetuned.require(name)?.data();
            let s = self.second.require(name)?.data();
            let data = p
                .data()
                .iter()
                .zip(f)
                .zip(s)
                .map(|((&p, &f), &s)| {
                    let (p, f, s) = (p as f64, f as f64, s as f64);
                    (p + a * (f - p) + b * (s - p)) as f32
                })
                .collect();
            out.insert(name, Tensor::new(p.shape().to_vec(), data))?;
        }
        Ok(out)
    }

    pub fn evaluate(&self, params: &ParamStore<f32>, quantity: Quantity, batch: &EvalBatch) -> Result<f64> {
        match quantity {
            Quantity::Loss => batch_loss(params, &self.config, batch),
            Quantity::GradientNorm => batch_gradient_norm(params, &self.config, batch),
        }
    }

    pub fn evaluate_at(&self, a: f64, b: f64, quantity: Quantity, batch: &EvalBatch) -> Result<f64> {
        self.evaluate(&self.point(a, b)?, quantity, batch)
    }

    /// Values at `(0,0)`, `(1,0)` and `(0,1)`, evaluated on the anchor
    /// parameters themselves.
    pub fn corners(&self, quantity: Quantity, batch: &EvalBatch) -> Result<Corners> {
        Ok(Corners {
            origin: self.evaluate(&self.pretrained, quantity, batch)?,
            finetuned: self.evaluate(&self.finetuned, quantity, batch)?,
            second: self.evaluate(&self.second, quantity, batch)?,
        })
    }
}

pub fn pinned_classifier_stream(seed: u64) -> RngStream {
    RngStream::root(seed).split("classifier")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub origin: f64,
    pub finetuned: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub quantity: Quantity,
    pub spec: SurfaceSpec,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `values[i][j]` is the value at `(a[i], b[j])`.
    pub values: Vec<Vec<f64>>,
    pub corners: Corners,
}

impl SurfaceGrid {
    pub fn non_finite(&self) -> usize {
        self.values.iter().flatten().filter(|v| !v.is_finite()).count()
    }

    /// Grid CSV: a header of b values, then one row per a value.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(std::iter::once("a\\b".to_string()).chain(self.b.iter().map(|&b| fmt_f64(b))));
        for (a, row) in self.a.iter().zip(&self.values) {
            t.push(std::iter::once(fmt_f64(*a)).chain(row.iter().map(|&v| fmt_f64(v))));
        }
        t
    }
}

fn map_points<F>(points: &[(usize, usize)], f: F) -> Vec<Result<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        points.par_iter().map(|&(i, j)| f(i, j)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.iter().map(|&(i, j)| f(i, j)).collect()
    }
}

pub fn surface(spec: &SurfaceSpec, space: &Subspace, quantity: Quantity, batch: &EvalBatch) -> Result<SurfaceGrid> {
    spec.validate()?;
    let axis = spec.axis();
    let n = axis.len();
    let points: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let flat = map_points(&points, |i, j| space.evaluate_at(axis[i], axis[j], quantity, batch));
    let mut values = vec![Vec::with_capacity(n); n];
    for ((i, _), v) in points.iter().zip(flat) {
        values[*i].push(v?);
    }
    Ok(SurfaceGrid {
        quantity,
        spec: *spec,
        a: axis.clone(),
        b: axis,
        values,
        corners: space.corners(quantity, batch)?,
    })
}

pub fn loss_surface(spec: &SurfaceSpec, space: &Subspace, batch: &EvalBatch) -> Result<SurfaceGrid> {
    surface(spec, space, Quantity::Loss, batch)
}

pub fn gradient_norm_surface(spec: &SurfaceSpec, space: &Subspace, batch: &EvalBatch) -> Result<SurfaceGrid> {
    surface(spec, space, Quantity::GradientNorm, batch)
}

/// Writes `<quantity>.csv` and `<quantity>.svg` per grid plus a manifest.
pub fn emit_surfaces(
    grids: &[SurfaceGrid],
    inputs: &[(&str, &Checkpoint)],
    batch: &EvalBatch,
    levels: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    let mut m = Manifest::new("surface");
    if let Some(g) = grids.first() {
        m.set_nested("surface.spec", &g.spec)?;
    }
    for (role, c) in inputs {
        m.set(format!("input.{role}.sha256"), c.content_hash());
    }
    m.set("input.batch.sha256", batch.content_hash());
    m.set_u64("input.batch.size", batch.labels.len() as u64);
    for g in grids {
        let q = g.quantity.name();
        let csv = out_dir.join(format!("{q}.csv"));
        g.to_table().write(&csv)?;
        let svg = out_dir.join(format!("{q}.svg"));
        let markers = [("p", 0.0, 0.0), ("f", 1.0, 0.0), ("s", 0.0, 1.0)];
        write_file(&svg, crate::svg::level_map(&g.a, &g.b, &g.values, levels, q, &markers).as_bytes())?;
        m.set_f64(format!("{q}.corner.origin"), g.corners.origin);
        m.set_f64(format!("{q}.corner.finetuned"), g.corners.finetuned);
        m.set_f64(format!("{q}.corner.second"), g.corners.second);
        m.set_u64(format!("{q}.non_finite"), g.non_finite() as u64);
        for p in [csv, svg] {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            m.set(format!("output.{name}.sha256"), sha256_file(&p)?);
            written.push(p);
        }
    }
    written.push(m.write(out_dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_is_inclusive() {
        let s = SurfaceSpec::default();
        let a = s.axis();
        assert_eq!(a.len(), 40);
        assert_eq!(a[0], -1.5);
        assert_eq!(a[39], 1.5);
        let s = SurfaceSpec { range: [-1.0, 1.0], resolution: 5, ..s };
        assert_eq!(s.axis(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(SurfaceSpec { resolution: 1, ..s }.validate().is_err());
    }
}
