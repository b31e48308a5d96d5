//! Multi-seed, multi-configuration sweeps and their reports.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::artifacts::{ensure_dir, key_segment, fmt_f64, parse_f64, sha256_file, write_file, write_run, Manifest, Table};
use crate::config::{CellSpec, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::metrics::{compare_stability, per_point_stability, performance_variance_stability, summary_stats, LeveneResult};
use crate::model::Checkpoint;
use crate::train::{run_finetune, RunRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub name: String,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
}

fn cell(id: &str, set: &[(&str, toml::Value)]) -> CellSpec {
    CellSpec {
        id: id.to_string(),
        set: set.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

/// Cells of a bundled plan. Both recipes keep the configured learning rate.
pub fn bundled_plan(name: &str) -> Result<Vec<CellSpec>> {
    use toml::Value::{Boolean, Integer};
    let devlin = || {
        cell(
            "devlin-default",
            &[("optim.bias_correction", Boolean(false)), ("run.epochs", Integer(3)), ("run.total_iterations", Integer(0))],
        )
    };
    let baseline = || {
        cell(
            "paper-baseline",
            &[("optim.bias_correction", Boolean(true)), ("run.epochs", Integer(20)), ("run.total_iterations", Integer(0))],
        )
    };
    match name {
        "devlin-default" => Ok(vec![devlin()]),
        "paper-baseline" => Ok(vec![baseline()]),
        "paper-baseline-vs-devlin-default" => Ok(vec![devlin(), baseline()]),
        "bc-ablation" => Ok([3, 10, 20]
            .iter()
            .flat_map(|&e| {
                [true, false].map(|bc| {
                    cell(
                        &format!("epochs={e},bc={}", if bc { "on" } else { "off" }),
                        &[("run.epochs", Integer(e)), ("run.total_iterations", Integer(0)), ("optim.bias_correction", Boolean(bc))],
                    )
                })
            })
            .collect()),
        other => Err(LabError::invalid(format!(
            "unknown bundled plan {other:?} (devlin-default, paper-baseline, paper-baseline-vs-devlin-default, bc-ablation)"
        ))),
    }
}

impl SweepPlan {
    /// Bundled cells, then listed cells, each crossed with every axis combination.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let s = &config.sweep;
        if s.seeds.is_empty() {
            return Err(LabError::invalid("sweep.seeds is empty"));
        }
        let unique: HashSet<_> = s.seeds.iter().collect();
        if unique.len() != s.seeds.len() {
            return Err(LabError::invalid("sweep.seeds must be distinct"));
        }
        let mut specs = match &s.plan {
            Some(name) => bundled_plan(name)?,
            None => Vec::new(),
        };
        specs.extend(s.cells.iter().cloned());
        if specs.is_empty() {
            specs.push(cell("base", &[]));
        }
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for axis in &s.axes {
            if axis.values.is_empty() {
                return Err(LabError::invalid(format!("sweep axis {} has no values", axis.path)));
            }
            combos = combos
                .iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.path.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut cells = Vec::new();
        let mut ids = HashSet::new();
        for spec in &specs {
            for combo in &combos {
                let mut cfg = config.clone();
                for (k, v) in spec.set.iter().map(|(k, v)| (k.as_str(), v)).chain(combo.iter().map(|(k, v)| (k.as_str(), v))) {
                    cfg = cfg.with(k, v)?;
                }
                let mut id = spec.id.clone();
                for (k, v) in combo {
                    id.push_str(&format!("/{k}={v}"));
                }
                if !ids.insert(id.clone()) {
                    return Err(LabError::invalid(format!("duplicate sweep cell id {id:?}")));
                }
                cells.push(Cell { id, config: cfg });
            }
        }
        Ok(Self {
            name: s.plan.clone().unwrap_or_else(|| "custom".to_string()),
            cells,
            seeds: s.seeds.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub runs: usize,
    /// NaN with fewer than two runs.
    pub std: f64,
    pub mean: f64,
    pub max: f64,
    pub failed: usize,
    pub variance: f64,
    pub per_point: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub id: String,
    pub config: ExperimentConfig,
    /// One record per seed, in plan seed order.
    pub records: Vec<RunRecord>,
    pub summary: CellSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub levene: LeveneResult,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub plan: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub comparisons: Vec<PairComparison>,
}

pub fn summarize(records: &[RunRecord]) -> Result<CellSummary> {
    let metrics: Vec<f64> = records.iter().map(|r| r.final_metric).collect();
    if metrics.is_empty() {
        return Err(LabError::invalid("summary of an empty cell"));
    }
    let (std, variance) = match summary_stats(&metrics) {
        Ok(s) => (s.std, performance_variance_stability(&metrics)?),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let correct: Vec<Vec<bool>> = records.iter().map(|r| r.dev_correct.clone()).collect();
    let per_point = per_point_stability(&correct).unwrap_or(f64::NAN);
    Ok(CellSummary {
        runs: records.len(),
        std,
        mean: metrics.iter().sum::<f64>() / metrics.len() as f64,
        max: metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        failed: records.iter().filter(|r| r.failed).count(),
        variance,
        per_point,
    })
}

fn run_jobs<F>(jobs: &[(usize, u64)], workers: usize, f: F) -> Result<Vec<Result<RunRecord>>>
where
    F: Fn(usize, u64) -> Result<RunRecord> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| LabError::invalid(format!("worker pool: {e}")))?;
        Ok(pool.install(|| jobs.par_iter().map(|&(c, s)| f(c, s)).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        Ok(jobs.iter().map(|&(c, s)| f(c, s)).collect())
    }
}

/// Runs every (cell, seed) pair from `init`. Results are merged by key, so
/// they do not depend on `workers`.
pub fn run_sweep(plan: &SweepPlan, init: &Checkpoint, workers: usize) -> Result<SweepResult> {
    init.validate()?;
    let mut data = Vec::with_capacity(plan.cells.len());
    for c in &plan.cells {
        if c.config.model != init.config {
            return Err(LabError::ConfigMismatch(format!(
                "cell {} model config differs from the initial checkpoint",
                c.id
            )));
        }
        data.push(c.config.datasets()?);
    }
    let jobs: Vec<(usize, u64)> = (0..plan.cells.len())
        .flat_map(|c| plan.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = run_jobs(&jobs, workers, |c, seed| {
        let cfg = plan.cells[c].config.run_config(seed);
        let (train, dev) = &data[c];
        run_finetune(&cfg, train, dev, init).map(|(record, _)| record)
    })?;

    let mut per_cell: Vec<Vec<RunRecord>> = vec![Vec::new(); plan.cells.len()];
    for ((c, _), r) in jobs.iter().zip(results) {
        per_cell[*c].push(r?);
    }
    let cells = plan
        .cells
        .iter()
        .zip(per_cell)
        .map(|(c, records)| {
            Ok(CellResult {
                id: c.id.clone(),
                config: c.config.clone(),
                summary: summarize(&records)?,
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let comparisons = compare_cells(&cells)?;
    Ok(SweepResult {
        plan: plan.name.clone(),
        seeds: plan.seeds.clone(),
        cells,
        comparisons,
    })
}

fn compare_cells(cells: &[CellResult]) -> Result<Vec<PairComparison>> {
    let mut out = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let a: Vec<f64> = cells[i].records.iter().map(|r| r.final_metric).collect();
            let b: Vec<f64> = cells[j].records.iter().map(|r| r.final_metric).collect();
            if a.len() < 2 || b.len() < 2 {
                continue;
            }
            let c = compare_stability(&a, &b)?;
            out.push(PairComparison {
                a: cells[i].id.clone(),
                b: cells[j].id.clone(),
                levene: c.levene,
                significant: c.significant,
            });
        }
    }
    Ok(out)
}

/// Epochs on a `subset_size` sample that give at least as many iterations as
/// `full_epochs` on the full set.
pub fn iterations_matched_epochs(full_train_size: u64, full_epochs: u64, batch_size: u64, subset_size: u64) -> Result<u64> {
    if full_train_size == 0 || full_epochs == 0 || batch_size == 0 || subset_size == 0 {
        return Err(LabError::invalid("iteration matching needs counts >= 1"));
    }
    if subset_size > full_train_size {
        return Err(LabError::invalid("subset larger than the full training set"));
    }
    let full_iters = full_train_size.div_ceil(batch_size) * full_epochs;
    Ok(full_iters.div_ceil(subset_size.div_ceil(batch_size)))
}

pub fn dir_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const SCATTER_FILE: &str = "scatter.csv";

/// Writes summary, box-plot, scatter, stability and comparison tables, an
/// SVG box plot, every run's traces and a manifest with file hashes.
pub fn emit_report(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.cells.is_empty() {
        return Err(LabError::invalid("empty sweep result"));
    }
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let mut summary = Table::new(["cell", "runs", "std", "mean", "max", "failed", "levene"]);
    for c in &result.cells {
        let notes: Vec<String> = result
            .comparisons
            .iter()
            .filter(|p| p.a == c.id || p.b == c.id)
            .map(|p| {
                let other = if p.a == c.id { &p.b } else { &p.a };
                format!(
                    "vs {other}: W={} p={}{}",
                    fmt_f64(p.levene.w),
                    fmt_f64(p.levene.p),
                    if p.significant { " *" } else { "" }
                )
            })
            .collect();
        let s = &c.summary;
        summary.push([
            c.id.clone(),
            s.runs.to_string(),
            fmt_f64(s.std),
            fmt_f64(s.mean),
            fmt_f64(s.max),
            s.failed.to_string(),
            notes.join("; "),
        ]);
    }
    let mut boxplot = Table::new(["cell", "seed", "metric", "failed", "reason"]);
    let mut scatter = Table::new(["run", "cell", "seed", "final_train_loss", "final_metric"]);
    let mut stability = Table::new(["cell", "variance", "per_point"]);
    for c in &result.cells {
        stability.push([c.id.clone(), fmt_f64(c.summary.variance), fmt_f64(c.summary.per_point)]);
        for (seed, r) in result.seeds.iter().zip(&c.records) {
            boxplot.push([
                c.id.clone(),
                seed.to_string(),
                fmt_f64(r.final_metric),
                u8::from(r.failed).to_string(),
                r.failure_reason.clone().unwrap_or_default(),
            ]);
            scatter.push([
                format!("{}/seed-{seed}", c.id),
                c.id.clone(),
                seed.to_string(),
                fmt_f64(r.final_train_loss),
                fmt_f64(r.final_metric),
            ]);
        }
    }
    let mut comparisons = Table::new(["cell_a", "cell_b", "w", "p", "significant"]);
    for p in &result.comparisons {
        comparisons.push([
            p.a.clone(),
            p.b.clone(),
            fmt_f64(p.levene.w),
            fmt_f64(p.levene.p),
            u8::from(p.significant).to_string(),
        ]);
    }
    for (name, table) in [
        (SUMMARY_FILE, &summary),
        (BOXPLOT_FILE, &boxplot),
        (SCATTER_FILE, &scatter),
        ("stability.csv", &stability),
        ("comparisons.csv", &comparisons),
    ] {
        let path = out_dir.join(name);
        table.write(&path)?;
        written.push(path);
    }

    let metric = result.cells[0]
        .records
        .first()
        .and_then(|r| r.metric)
        .map_or("metric", |m| m.name());
    let groups: Vec<(String, Vec<f64>)> = result
        .cells
        .iter()
        .map(|c| (c.id.clone(), c.records.iter().map(|r| r.final_metric).collect()))
        .collect();
    let svg_path = out_dir.join("boxplot.svg");
    write_file(&svg_path, crate::svg::box_plot(&groups, &format!("{} over {} seeds", result.plan, result.seeds.len()), metric).as_bytes())?;
    written.push(svg_path);

    for c in &result.cells {
        for (seed, r) in result.seeds.iter().zip(&c.records) {
            write_run(r, &out_dir.join("runs").join(dir_name(&c.id)).join(format!("seed-{seed}")))?;
        }
    }

    let mut m = Manifest::new("sweep");
    m.set("sweep.plan", result.plan.as_str());
    m.set("sweep.seeds", result.seeds.iter().map(|&s| s as i64).collect::<Vec<_>>());
    m.set("sweep.cells", result.cells.iter().map(|c| c.id.clone()).collect::<Vec<_>>());
    for c in &result.cells {
        m.set(format!("cell.{}.train_sha256", key_segment(&c.id)), c.config.datasets()?.0.content_hash());
    }
    for p in &written {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        m.set(format!("output.{name}.sha256"), sha256_file(p)?);
    }
    written.push(m.write(out_dir)?);
    Ok(written)
}

/// Recomputes per-cell summaries from a box-plot CSV.
pub fn summaries_from_boxplot(path: &Path) -> Result<IndexMap<String, (f64, f64, f64, usize)>> {
    let t = Table::read(path)?;
    let (ci, mi, fi) = (t.column("cell")?, t.column("metric")?, t.column("failed")?);
    let mut cells: IndexMap<String, (Vec<f64>, usize)> = IndexMap::new();
    for r in &t.rows {
        let e = cells.entry(r[ci].clone()).or_default();
        e.0.push(parse_f64(&r[mi])?);
        e.1 += usize::from(r[fi] == "1");
    }
    cells
        .into_iter()
        .map(|(id, (v, failed))| {
            let std = summary_stats(&v).map_or(f64::NAN, |s| s.std);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((id, (std, mean, max, failed)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_matching() {
        assert_eq!(iterations_matched_epochs(23596, 3, 16, 1000).unwrap(), 71);
        assert_eq!(iterations_matched_epochs(104744, 3, 16, 1000).unwrap(), 312);
        assert_eq!(iterations_matched_epochs(500, 7, 16, 500).unwrap(), 7);
        assert!(iterations_matched_epochs(10, 1, 1, 11).is_err());
    }

    #[test]
    fn plan_expansion() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.plan = Some("paper-baseline-vs-devlin-default".into());
        cfg.sweep.seeds = vec![1, 2];
        let p = SweepPlan::from_config(&cfg).unwrap();
        assert_eq!(p.cells.len(), 2);
        assert_eq!(p.cells[0].config.run.epochs, 3);
        assert!(!p.cells[0].config.optim.bias_correction);
        assert_eq!(p.cells[1].config.run.epochs, 20);
        assert!(p.cells[1].config.optim.bias_correction);

        cfg.sweep.plan = None;
        cfg.sweep.axes = vec![
            crate::config::AxisSpec { path: "run.epochs".into(), values: vec![3.into(), 10.into()] },
            crate::config::AxisSpec { path: "optim.bias_correction".into(), values: vec![true.into(), false.into()] },
        ];
        let p = SweepPlan::from_config(&cfg).unwrap();
        assert_eq!(p.cells.len(), 4);
        assert_eq!(p.cells[3].id, "base/run.epochs=10/optim.bias_correction=false");
        cfg.sweep.seeds = vec![1, 1];
        assert!(SweepPlan::from_config(&cfg).is_err());
    }
}
