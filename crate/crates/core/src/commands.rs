//! Command implementations behind the `ftlab` binary. Each writes under one
//! output directory and leaves a `manifest.txt` naming its inputs.

use std::path::{Path, PathBuf};

use crate::artifacts::{ensure_dir, fmt_f64, key_segment, read_run, sha256_file, write_file, write_run, Manifest, Table};
use crate::config::{derive_seed, ExperimentConfig, SurfaceQuantity};
use crate::data::generate_corpus;
use crate::error::{LabError, Result};
use crate::forgetting::{emit_probe, failure_signature, substitution_curve};
use crate::landscape::{emit_surfaces, surface, EvalBatch, Quantity, Subspace, SurfaceSpec};
use crate::model::Checkpoint;
use crate::sweep::{emit_report, run_sweep, summaries_from_boxplot, SweepPlan, BOXPLOT_FILE};
use crate::train::{run_finetune, run_pretrain, RunRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_DIR: &str = "report";

fn echo_config(m: &mut Manifest, config: &ExperimentConfig) -> Result<()> {
    m.set_nested("experiment", config)?;
    Ok(())
}

/// The config echoed into a command manifest.
pub fn config_from_manifest(m: &Manifest) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = m.get_nested("experiment")?;
    cfg.validate()?;
    Ok(cfg)
}

/// `run.init` when set, otherwise a fresh initialization seeded from the config.
pub fn initial_checkpoint(config: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = match &config.run.init {
        Some(path) => Checkpoint::load(path)?,
        None => Checkpoint::init(config.model, derive_seed(config.seed, "init"))?,
    };
    if ck.config != config.model {
        return Err(LabError::ConfigMismatch(
            "initial checkpoint model differs from the config's model section".into(),
        ));
    }
    Ok(ck)
}

fn load_required(path: &Option<PathBuf>, key: &str) -> Result<Checkpoint> {
    let path = path
        .as_ref()
        .ok_or_else(|| LabError::Config { path: key.into(), message: "checkpoint path required".into() })?;
    Checkpoint::load(path)
}

fn finish_run(
    record: &RunRecord,
    ck: &Checkpoint,
    config: &ExperimentConfig,
    inputs: &[(&str, String)],
    dir: &Path,
) -> Result<PathBuf> {
    let mut m = write_run(record, dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    for (k, v) in inputs {
        m.set(format!("input.{k}"), v.as_str());
    }
    m.set(format!("output.{CHECKPOINT_FILE}.sha256"), sha256_file(&ck_path)?);
    echo_config(&mut m, config)?;
    m.write(dir)?;
    Ok(dir.to_path_buf())
}

pub fn command_pretrain(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = out.join("pretrain");
    let (corpus, heldout) = config.corpora()?;
    let init = Checkpoint::init(config.model, derive_seed(config.seed, "init"))?;
    let (record, ck) = run_pretrain(&config.pretrain_config(), &corpus, &heldout, &init)?;
    finish_run(
        &record,
        &ck,
        config,
        &[
            ("init.sha256", init.content_hash()),
            ("corpus.sha256", corpus.content_hash()),
            ("heldout.sha256", heldout.content_hash()),
        ],
        &dir,
    )
}

pub fn command_finetune(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = out.join("finetune");
    let (train, dev) = config.datasets()?;
    let init = initial_checkpoint(config)?;
    let (record, ck) = run_finetune(&config.run_config(config.run.seed.unwrap_or(config.seed)), &train, &dev, &init)?;
    finish_run(
        &record,
        &ck,
        config,
        &[
            ("init.sha256", init.content_hash()),
            ("train.sha256", train.content_hash()),
            ("dev.sha256", dev.content_hash()),
        ],
        &dir,
    )
}

pub fn command_sweep(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<PathBuf> {
    let dir = out.join("sweep");
    let plan = SweepPlan::from_config(config)?;
    let init = initial_checkpoint(config)?;
    let result = run_sweep(&plan, &init, workers)?;
    emit_report(&result, &dir)?;
    let mut m = Manifest::read(&dir)?;
    m.set("input.init.sha256", init.content_hash());
    echo_config(&mut m, config)?;
    m.write(&dir)?;
    Ok(dir)
}

pub fn surface_spec(config: &ExperimentConfig) -> SurfaceSpec {
    let s = &config.surface;
    SurfaceSpec {
        range: s.range,
        resolution: s.resolution,
        batch_size: s.batch_size,
        classifier_seed: s.classifier_seed,
    }
}

/// The fixed training batch surfaces are evaluated on.
pub fn surface_batch(config: &ExperimentConfig) -> Result<EvalBatch> {
    let (train, _) = config.datasets()?;
    EvalBatch::sample(&train, config.surface.batch_size, derive_seed(config.seed, "surface"))
}

pub fn command_surface(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = out.join("surface");
    let s = &config.surface;
    let p = load_required(&s.pretrained, "surface.pretrained")?;
    let f = load_required(&s.finetuned, "surface.finetuned")?;
    let second = load_required(&s.second, "surface.second")?;
    let spec = surface_spec(config);
    let space = Subspace::new(&p, &f, &second, spec.classifier_seed)?;
    let batch = surface_batch(config)?;
    let quantities: &[Quantity] = match s.quantity {
        SurfaceQuantity::Loss => &[Quantity::Loss],
        SurfaceQuantity::GradientNorm => &[Quantity::GradientNorm],
        SurfaceQuantity::Both => &[Quantity::Loss, Quantity::GradientNorm],
    };
    let grids = quantities
        .iter()
        .map(|&q| surface(&spec, &space, q, &batch))
        .collect::<Result<Vec<_>>>()?;
    emit_surfaces(&grids, &[("pretrained", &p), ("finetuned", &f), ("second", &second)], &batch, s.contour_levels, &dir)?;
    let mut m = Manifest::read(&dir)?;
    echo_config(&mut m, config)?;
    m.write(&dir)?;
    Ok(dir)
}

pub fn command_forgetting(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = out.join("forgetting");
    let p = &config.probe;
    let pre = load_required(&p.pretrained, "probe.pretrained")?;
    let ft = load_required(&p.finetuned, "probe.finetuned")?;
    let corpus = generate_corpus(&config.data.grammar, derive_seed(config.seed, "probe-corpus"), p.eval_size)?;
    let curve = substitution_curve(&ft, &pre, &corpus, &config.pretrain.mask, p.mask_seed)?;
    let signature = match &p.run {
        Some(run) => Some(failure_signature(&read_run(run)?, config.model.num_classes, p.band)?),
        None => None,
    };
    emit_probe(&curve, signature.as_ref(), &dir)?;
    let mut m = Manifest::read(&dir)?;
    echo_config(&mut m, config)?;
    m.write(&dir)?;
    Ok(dir)
}

fn find_manifests(root: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| LabError::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| LabError::io(root, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    if entries.iter().any(|p| p.file_name().is_some_and(|n| n == crate::artifacts::MANIFEST_FILE)) {
        out.push(root.to_path_buf());
    }
    for p in entries {
        if p.is_dir() && p != skip {
            find_manifests(&p, skip, out)?;
        }
    }
    Ok(())
}

/// Summaries and plots for every artifact directory under `input`, written
/// to `out/report`.
pub fn command_report(input: &Path, out: &Path) -> Result<PathBuf> {
    if !input.is_dir() {
        return Err(LabError::NoArtifacts(input.to_path_buf()));
    }
    let dir = out.join(REPORT_DIR);
    let mut found = Vec::new();
    find_manifests(input, &dir, &mut found)?;
    if found.is_empty() {
        return Err(LabError::NoArtifacts(input.to_path_buf()));
    }
    let mut index = Table::new(["path", "kind"]);
    let mut written = Vec::new();
    let mut inputs = Vec::new();
    for src in &found {
        let m = Manifest::read(src)?;
        let kind = m.get_str("kind").unwrap_or("unknown").to_string();
        let rel = src.strip_prefix(input).unwrap_or(src);
        let rel_name = if rel.as_os_str().is_empty() { ".".to_string() } else { rel.display().to_string() };
        index.push([rel_name.clone(), kind.clone()]);
        inputs.push((rel_name, sha256_file(&src.join(crate::artifacts::MANIFEST_FILE))?));
        let target = dir.join(rel);
        match kind.as_str() {
            "sweep" => {
                let summaries = summaries_from_boxplot(&src.join(BOXPLOT_FILE))?;
                let mut t = Table::new(["cell", "std", "mean", "max", "failed"]);
                for (id, (std, mean, max, failed)) in &summaries {
                    t.push([id.clone(), fmt_f64(*std), fmt_f64(*mean), fmt_f64(*max), failed.to_string()]);
                }
                let path = target.join("summary.csv");
                ensure_dir(&target)?;
                t.write(&path)?;
                written.push(path);
            }
            "run" => {
                let record = read_run(src)?;
                let loss: Vec<(f64, f64)> = record.losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect();
                let path = target.join("loss.svg");
                write_file(&path, crate::svg::line_plot(&[("loss".into(), loss)], "training loss", "iteration", "loss", false).as_bytes())?;
                written.push(path);
                let norms: Vec<(String, Vec<(f64, f64)>)> = record
                    .grad_norms
                    .iter()
                    .map(|(g, v)| (g.clone(), v.iter().enumerate().map(|(i, &n)| ((i + 1) as f64, n)).collect()))
                    .collect();
                let path = target.join("grad_norms.svg");
                write_file(&path, crate::svg::line_plot(&norms, "gradient norms", "iteration", "norm", true).as_bytes())?;
                written.push(path);
            }
            _ => {}
        }
    }
    let index_path = dir.join("index.csv");
    index.write(&index_path)?;
    written.push(index_path);
    let mut m = Manifest::new("report");
    for (rel, hash) in &inputs {
        m.set(format!("input.{}.manifest_sha256", key_segment(rel)), hash.as_str());
    }
    for p in &written {
        let rel = p.strip_prefix(&dir).unwrap_or(p).display().to_string();
        m.set(format!("output.{}.sha256", key_segment(&rel)), sha256_file(p)?);
    }
    m.write(&dir)?;
    Ok(dir)
}
