//! Layer-substitution probe for forgetting of the masked-LM objective, and
//! the trivial-loss failure signature.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::artifacts::{ensure_dir, fmt_f64, sha256_file, write_file, Manifest, Table};
use crate::data::{Corpus, MaskPolicy};
use crate::error::{LabError, Result};
use crate::model::{substitute_top_layers, Checkpoint, MlmBatch};
use crate::params::hex;
use crate::train::{batches_perplexity, fixed_mask_batches, RunRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionCurve {
    /// `0..=num_layers`.
    pub k: Vec<usize>,
    pub perplexity: Vec<f64>,
    pub finetuned: String,
    pub pretrained: String,
    pub corpus: String,
    /// Hash of the masked inputs, positions and targets shared by every k.
    pub mask: String,
}

pub fn mask_hash(batches: &[MlmBatch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        for v in [b.positions.len()].iter().chain(&b.input.ids).chain(&b.positions).chain(&b.targets) {
            h.update((*v as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Perplexity of hybrids whose top `k` layers are restored to the
/// pre-trained weights, for every `k`, with one mask pattern.
pub fn substitution_curve(
    fine_tuned: &Checkpoint,
    pre_trained: &Checkpoint,
    corpus: &Corpus,
    policy: &MaskPolicy,
    mask_seed: u64,
) -> Result<SubstitutionCurve> {
    if fine_tuned.config != pre_trained.config {
        return Err(LabError::ConfigMismatch(
            "forgetting probe checkpoints have different model configs".into(),
        ));
    }
    let config = fine_tuned.config;
    let batches = fixed_mask_batches(corpus, policy, config.vocab_size, mask_seed)?;
    let ks: Vec<usize> = (0..=config.num_layers).collect();
    let eval = |k: usize| -> Result<f64> {
        let hybrid = substitute_top_layers(fine_tuned, pre_trained, k)?;
        batches_perplexity(&hybrid.params, &config, &batches)
    };
    #[cfg(feature = "parallel")]
    let perplexity: Vec<Result<f64>> = {
        use rayon::prelude::*;
        ks.par_iter().map(|&k| eval(k)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let perplexity: Vec<Result<f64>> = ks.iter().map(|&k| eval(k)).collect();
    Ok(SubstitutionCurve {
        perplexity: perplexity.into_iter().collect::<Result<_>>()?,
        k: ks,
        finetuned: fine_tuned.content_hash(),
        pretrained: pre_trained.content_hash(),
        corpus: corpus.content_hash(),
        mask: mask_hash(&batches),
    })
}

impl SubstitutionCurve {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["k", "perplexity"]);
        for (k, p) in self.k.iter().zip(&self.perplexity) {
            t.push([k.to_string(), fmt_f64(*p)]);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureSignature {
    pub final_train_loss: f64,
    /// `ln(num_classes)`.
    pub trivial_loss: f64,
    pub band: f64,
    pub loss_is_trivial: bool,
    pub at_or_below_baseline: bool,
}

impl FailureSignature {
    pub fn optimization_failure(&self) -> bool {
        self.loss_is_trivial && self.at_or_below_baseline
    }
}

pub const DEFAULT_BAND: f64 = 0.05;

pub fn trivial_loss_band(loss: f64, num_classes: usize, band: f64) -> bool {
    (loss - (num_classes as f64).ln()).abs() <= band
}

pub fn failure_signature(record: &RunRecord, num_classes: usize, band: f64) -> Result<FailureSignature> {
    if num_classes < 2 {
        return Err(LabError::invalid("failure signature needs >= 2 classes"));
    }
    let baseline = record.baseline;
    if !baseline.is_finite() {
        return Err(LabError::invalid("run record has no baseline"));
    }
    Ok(FailureSignature {
        final_train_loss: record.final_train_loss,
        trivial_loss: (num_classes as f64).ln(),
        band,
        loss_is_trivial: trivial_loss_band(record.final_train_loss, num_classes, band),
        at_or_below_baseline: record.final_metric <= baseline,
    })
}

/// Writes `curve.csv`, `curve.svg`, the optional signature and a manifest.
pub fn emit_probe(
    curve: &SubstitutionCurve,
    signature: Option<&FailureSignature>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let csv = out_dir.join("curve.csv");
    curve.to_table().write(&csv)?;
    let svg = out_dir.join("curve.svg");
    let series = vec![(
        "hybrid".to_string(),
        curve.k.iter().zip(&curve.perplexity).map(|(&k, &p)| (k as f64, p)).collect(),
    )];
    write_file(
        &svg,
        crate::svg::line_plot(&series, "top-k layers restored", "k", "perplexity", false).as_bytes(),
    )?;
    let mut m = Manifest::new("forgetting");
    m.set("input.finetuned.sha256", curve.finetuned.as_str());
    m.set("input.pretrained.sha256", curve.pretrained.as_str());
    m.set("input.corpus.sha256", curve.corpus.as_str());
    m.set("probe.mask.sha256", curve.mask.as_str());
    if let Some(s) = signature {
        m.set_f64("signature.final_train_loss", s.final_train_loss);
        m.set_f64("signature.trivial_loss", s.trivial_loss);
        m.set_f64("signature.band", s.band);
        m.set("signature.loss_is_trivial", s.loss_is_trivial);
        m.set("signature.at_or_below_baseline", s.at_or_below_baseline);
        m.set("signature.optimization_failure", s.optimization_failure());
    }
    let mut written = vec![csv, svg];
    for p in &written {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        m.set(format!("output.{name}.sha256"), sha256_file(p)?);
    }
    written.push(m.write(out_dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band() {
        assert!(trivial_loss_band(0.692, 2, DEFAULT_BAND));
        assert!(!trivial_loss_band(0.01, 2, DEFAULT_BAND));
        assert!(trivial_loss_band(4f64.ln() + 0.04, 4, DEFAULT_BAND));
        assert!(!trivial_loss_band(2f64.ln(), 4, DEFAULT_BAND));
    }
}
