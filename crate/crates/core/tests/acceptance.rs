//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 1 compares against tabulated factor values for t = 10 and
//! t = 100 that disagree with direct evaluation of the formula by more than
//! the tolerance. It is checked as written, reported as FAIL, and does not
//! fail the target. Any other failure does.

#![allow(clippy::excessive_precision)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ftlab::autodiff::Tape;
use ftlab::commands::{
    command_finetune, command_forgetting, command_pretrain, command_report, command_surface, command_sweep,
    surface_batch, surface_spec, CHECKPOINT_FILE,
};
use ftlab::config::ExperimentConfig;
use ftlab::data::{constant_baseline, generate_classification_task, majority_baseline, TaskSpec};
use ftlab::forgetting::{failure_signature, mask_hash, substitution_curve, DEFAULT_BAND};
use ftlab::gradcheck::finite_difference_check;
use ftlab::landscape::{batch_loss, loss_surface, pinned_classifier_stream, Quantity, Subspace};
use ftlab::metrics::{compare_stability, levene_test, ConfusionCounts, MetricKind, SIGNIFICANCE_LEVEL};
use ftlab::model::{classify_graph, init_params, reinit_classifier, Checkpoint, Mode, ModelConfig, TokenBatch};
use ftlab::optim::{
    adam_update, bias_correction_factor, scalar_store, warmup_linear_lr, AdamConfig, AdamState, ScheduleConfig,
};
use ftlab::rng::RngStream;
use ftlab::sweep::{iterations_matched_epochs, run_sweep, SweepPlan, SweepResult};
use ftlab::train::{classify_failed_run, fixed_mask_batches, heldout_perplexity, layer_gradient_norms, run_finetune, Granularity};
use ftlab::{ParamStore, Result, Tensor};

#[path = "fixtures/levene.rs"]
mod levene_fixtures;

const KNOWN_UNATTAINABLE: &[u32] = &[1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

struct Suite {
    results: Vec<(u32, bool)>,
}

impl Suite {
    fn run(&mut self, n: u32, name: &str, f: impl FnOnce() -> Result<Outcome>) {
        let start = Instant::now();
        let o = f().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        let secs = start.elapsed().as_secs_f64();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{name}] {status} ({secs:.1}s): {}", o.detail);
        self.results.push((n, o.pass));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Result<Outcome> {
    let expected = [(1, 0.3162278), (10, 0.1531937), (100, 0.3085580)];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (t, want) in expected {
        let got = bias_correction_factor(t, 0.9, 0.999)?;
        worst = worst.max((got - want).abs());
        parts.push(format!("t={t}: {got:.8} vs {want}"));
    }
    let tail = bias_correction_factor(20_000, 0.9, 0.999)?;
    let tail_ok = tail > 0.999999 && bias_correction_factor(200_000, 0.9, 0.999)? > 0.999999;
    parts.push(format!("t=2e4: {tail:.9}"));
    outcome(worst <= 1e-6 && tail_ok, format!("{}; max abs error {worst:.2e} (tol 1e-6)", parts.join(", ")))
}

fn scalar_step(bias_correction: bool) -> Result<f64> {
    let mut p = scalar_store("w", 1.0f64);
    let g = scalar_store("w", 1.0f64);
    let mut s = AdamState::new(&p);
    let cfg = AdamConfig {
        alpha: 0.1,
        epsilon: 0.0,
        weight_decay_lambda: 0.0,
        bias_correction,
        ..AdamConfig::default()
    };
    adam_update(&mut p, &g, &mut s, &cfg, 0.1)?;
    Ok(p.require("w")?.item())
}

const ADAM_ORACLE_BC: [[f64; 3]; 10] = [
    [0.98990000287479704643, -0.48995000166435638624, 0.25997499209431209957],
    [0.97978889899432291645, -0.47992333478457504841, 0.26970638219976401417],
    [0.96965924054185993338, -0.46993725992924743767, 0.27884103419589159529],
    [0.95950408393362054574, -0.46001107408111937791, 0.28676983589773915276],
    [0.94931699864954264971, -0.45016633957016015668, 0.2926274833338997752],
    [0.93909206579036998671, -0.44042713297152428577, 0.29562432326716664463],
    [0.92882386940689495489, -0.43082031127438631171, 0.29556723108018152294],
    [0.91850748276595002867, -0.4213757898552019119, 0.29288241757367556853],
    [0.90813845114028873148, -0.41212682298614055635, 0.28819285151916612695],
    [0.89771277228761932746, -0.40311027247476911181, 0.2820314800917631427],
];

const ADAM_ORACLE_NO_BC: [[f64; 3]; 10] = [
    [0.96827723248922268414, -0.46832722866147322544, 0.28159775160170355754],
    [0.92565396804611026114, -0.4259266973326151976, 0.32218483019481608033],
    [0.87599059047443132491, -0.37689354089365908123, 0.36222595713552535893],
    [0.82139219930796810453, -0.32364296115517764126, 0.38892495651910381427],
    [0.7632457889567413662, -0.26795711045211469332, 0.39400479709700389832],
    [0.70255227032727691919, -0.21132940939593007125, 0.37968225053154881596],
    [0.6400730526422738469, -0.15512189854468946182, 0.35126998823229576244],
    [0.57640685589092419952, -0.10064605490837672156, 0.31292121479247324185],
    [0.51203459230681310298, -0.049197998826162277383, 0.26744348537277980654],
    [0.44734766468253274196, -0.0020557024777018749047, 0.21676560714109702907],
];

/// Ten steps on `g = 2 theta - 1 + 0.1 t` from `[1, -0.5, 0.25]`.
fn ten_step_error(bias_correction: bool, oracle: &[[f64; 3]; 10]) -> Result<f64> {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![3], vec![1.0f64, -0.5, 0.25]))?;
    let mut s = AdamState::new(&p);
    let cfg = AdamConfig {
        alpha: 0.01,
        epsilon: 1e-8,
        weight_decay_lambda: 0.01,
        bias_correction,
        decay_exempt: vec![],
        ..AdamConfig::default()
    };
    let mut worst: f64 = 0.0;
    for (t, want) in oracle.iter().enumerate() {
        let g: Vec<f64> = p.require("w")?.data().iter().map(|x| 2.0 * x - 1.0 + 0.1 * (t + 1) as f64).collect();
        let mut gs = ParamStore::new();
        gs.insert("w", Tensor::new(vec![3], g))?;
        adam_update(&mut p, &gs, &mut s, &cfg, 0.01)?;
        for (got, want) in p.require("w")?.data().iter().zip(want) {
            worst = worst.max((got - want).abs());
        }
    }
    Ok(worst)
}

fn criterion_2() -> Result<Outcome> {
    let on = scalar_step(true)?;
    let off = scalar_step(false)?;
    // 0.6837722 is 1 - sqrt(0.1) shown to seven decimals.
    let exact_off = 1.0 - 0.1f64.sqrt();
    let hand = (on - 0.9).abs() <= 1e-9
        && (off - exact_off).abs() <= 1e-9
        && format!("{off:.7}") == "0.6837722";
    let e_on = ten_step_error(true, &ADAM_ORACLE_BC)?;
    let e_off = ten_step_error(false, &ADAM_ORACLE_NO_BC)?;
    outcome(
        hand && e_on <= 1e-12 && e_off <= 1e-12,
        format!("theta1 {on:.10} (bc) / {off:.10} (no bc); 10-step max error {e_on:.1e} / {e_off:.1e}"),
    )
}

fn criterion_3() -> Result<Outcome> {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 17)?.cast::<f64>();
    let mut rng = RngStream::root(5);
    let rows: Vec<Vec<usize>> = (0..2).map(|_| (0..8).map(|_| rng.below(cfg.vocab_size)).collect()).collect();
    let tokens = TokenBatch::from_rows(rows.iter().map(Vec::as_slice))?;
    let labels = [0usize, 1];
    let r = finite_difference_check(
        |tape, p| Ok(classify_graph(tape, p, &cfg, &tokens, &labels, Mode::Eval, None)?.0),
        &params,
        200,
        6e-3,
        11,
    )?;
    outcome(
        r.checked >= 200 && r.max_rel_error < 1e-6,
        format!("max relative error {:.2e} over {} coordinates", r.max_rel_error, r.checked),
    )
}

fn criterion_4() -> Result<Outcome> {
    let s = ScheduleConfig::warmup_linear(1000, 0.1, 2e-5);
    let w = s.warmup_steps();
    let (l0, lw, lt, mid) = (
        warmup_linear_lr(0, &s)?,
        warmup_linear_lr(w, &s)?,
        warmup_linear_lr(1000, &s)?,
        warmup_linear_lr(550, &s)?,
    );
    outcome(
        l0 == 0.0 && lw == 2e-5 && lt == 0.0 && (mid - 1e-5).abs() <= 1e-12,
        format!("lr(0)={l0}, lr(W={w})={lw}, lr(T)={lt}, lr(550)={mid}"),
    )
}

fn criterion_5() -> Result<Outcome> {
    let scitail = iterations_matched_epochs(23596, 3, 16, 1000)?;
    let identity = iterations_matched_epochs(2490, 3, 16, 2490)?;
    outcome(scitail == 71 && identity == 3, format!("23596/3/16 -> 1000: {scitail} epochs; identity: {identity}"))
}

fn criterion_6() -> Result<Outcome> {
    let boundary = classify_failed_run(0.53, 0.53) && !classify_failed_run(0.5300001, 0.53);
    let mcc = classify_failed_run(0.0, 0.0) && classify_failed_run(-0.1, 0.0) && !classify_failed_run(1e-9, 0.0);
    let spec = TaskSpec::default();
    let (train, dev) = generate_classification_task(&spec, 7)?;
    let majority = train.majority_label()?;
    let base = constant_baseline(&dev, majority)?;
    let rte_style = classify_failed_run(base, base) && (majority_baseline(&dev)? - 0.53).abs() < 0.03;
    let mcc_spec = TaskSpec { metric: MetricKind::Mcc, ..spec };
    let (_, mdev) = generate_classification_task(&mcc_spec, 7)?;
    let const_mcc = constant_baseline(&mdev, majority)?;
    outcome(
        boundary && mcc && rte_style && const_mcc == 0.0 && classify_failed_run(const_mcc, 0.0),
        format!("0.53 vs 0.53 failed={boundary}; mcc<=0 failed={mcc}; majority-class dev baseline {base:.4} failed={rte_style}; constant predictor mcc {const_mcc}"),
    )
}

fn criterion_7() -> Result<Outcome> {
    let same = levene_test(&[vec![1.0, 2.0, 3.0], vec![11.0, 12.0, 13.0]])?;
    let identical = same.w == 0.0 && same.p == 1.0;
    let fixtures = levene_fixtures::fixtures();
    let mut worst_w: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for (g, w, p) in &fixtures {
        let r = levene_test(g)?;
        if w.is_infinite() {
            worst_w = worst_w.max(if r.w.is_infinite() { 0.0 } else { 1.0 });
        } else {
            worst_w = worst_w.max(rel(r.w, *w));
        }
        worst_p = worst_p.max((r.p - p).abs());
    }
    let a = [0.5, 0.9, 0.5, 0.88, 0.5, 0.91, 0.52, 0.9];
    let b = [0.86, 0.87, 0.85, 0.86, 0.88, 0.87, 0.86, 0.85];
    let c = compare_stability(&a, &b)?;
    let flag = c.significant == (c.levene.p < SIGNIFICANCE_LEVEL) && SIGNIFICANCE_LEVEL == 1e-3;
    outcome(
        identical && fixtures.len() >= 10 && worst_w <= 1e-6 && worst_p <= 1e-6 && flag,
        format!(
            "identical deviations W={} p={}; {} fixtures, max rel W error {worst_w:.1e}, max abs p error {worst_p:.1e}",
            same.w,
            same.p,
            fixtures.len()
        ),
    )
}

fn criterion_12() -> Result<Outcome> {
    let c = ConfusionCounts::new(3, 1, 4, 2);
    let (mcc, f1) = (c.mcc()?, c.f1()?);
    let degenerate = ConfusionCounts::new(0, 0, 5, 5).mcc()? == 0.0
        && ConfusionCounts::new(0, 0, 5, 0).f1()? == 0.0
        && ConfusionCounts::new(5, 5, 0, 0).mcc()? == 0.0;
    outcome(
        (mcc - 0.4082483).abs() <= 1e-6 && (f1 - 0.6667).abs() <= 1e-4 && (f1 - 2.0 / 3.0).abs() <= 1e-6 && degenerate,
        format!("mcc {mcc:.7}, f1 {f1:.7}, degenerate conventions {degenerate}"),
    )
}

/// Artefacts shared by the pinned-benchmark criteria.
struct Bench {
    config: ExperimentConfig,
    pretrained: Checkpoint,
    sweep: SweepResult,
}

fn benchmark_config() -> Result<ExperimentConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.toml");
    ExperimentConfig::load(Some(&path), &[])
}

fn anchors() -> BTreeMap<String, f64> {
    let text = include_str!("fixtures/benchmark_anchors.toml");
    let table: toml::Table = text.parse().expect("anchor fixture parses");
    let mut out = BTreeMap::new();
    for (section, v) in table {
        for (k, v) in v.as_table().expect("anchor sections are tables") {
            let v = v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).expect("numeric anchor");
            out.insert(format!("{section}.{k}"), v);
        }
    }
    out
}

fn anchor_mismatches(found: &[(String, f64)]) -> Vec<String> {
    let a = anchors();
    found
        .iter()
        .filter_map(|(k, v)| match a.get(k) {
            Some(want) if rel(*v, *want) <= 1e-9 || v == want => None,
            Some(want) => Some(format!("{k}={v} (anchor {want})")),
            None => Some(format!("{k}={v} (no anchor)")),
        })
        .collect()
}

fn criterion_11(bench: &Result<Bench>) -> Result<Outcome> {
    let b = bench.as_ref().map_err(|e| ftlab::LabError::invalid(e.to_string()))?;
    let cell = |id: &str| b.sweep.cells.iter().find(|c| c.id == id).expect("bundled cell present");
    let (unstable, stable) = (cell("devlin-default"), cell("paper-baseline"));
    let (su, ss) = (&unstable.summary, &stable.summary);
    let mut off_band = Vec::new();
    for r in unstable.records.iter().filter(|r| r.failed) {
        let s = failure_signature(r, b.config.model.num_classes, DEFAULT_BAND)?;
        if !s.loss_is_trivial {
            off_band.push(format!("seed {}: {:.4}", r.config.seed, r.final_train_loss));
        }
    }
    let mismatches = anchor_mismatches(&[
        ("devlin-default.std".into(), su.std),
        ("devlin-default.mean".into(), su.mean),
        ("devlin-default.failed".into(), su.failed as f64),
        ("paper-baseline.std".into(), ss.std),
        ("paper-baseline.mean".into(), ss.mean),
        ("paper-baseline.failed".into(), ss.failed as f64),
    ]);
    let pass = b.sweep.seeds.len() == 25
        && ss.std < su.std
        && ss.failed < su.failed
        && su.failed > 0
        && off_band.is_empty()
        && mismatches.is_empty();
    outcome(
        pass,
        format!(
            "std {:.4} (bc on, {} failed) vs {:.4} (bc off, {} failed) over {} seeds; failed losses off the ln 2 band: {:?}; anchor mismatches: {:?}",
            ss.std,
            ss.failed,
            su.std,
            su.failed,
            b.sweep.seeds.len(),
            off_band,
            mismatches
        ),
    )
}

fn finetune_from(config: &ExperimentConfig, init: &Checkpoint, seed: u64, bias_correction: bool, epochs: u64) -> Result<(ftlab::train::RunRecord, Checkpoint)> {
    let mut rc = config.run_config(seed);
    rc.adam.bias_correction = bias_correction;
    rc.epochs = Some(epochs);
    rc.total_iterations = None;
    let (train, dev) = config.datasets()?;
    run_finetune(&rc, &train, &dev, init)
}

fn criterion_8(bench: &Result<Bench>) -> Result<Outcome> {
    let b = bench.as_ref().map_err(|e| ftlab::LabError::invalid(e.to_string()))?;
    let (_, f) = finetune_from(&b.config, &b.pretrained, 0, true, 20)?;
    let (_, s) = finetune_from(&b.config, &b.pretrained, 1, true, 20)?;
    let spec = surface_spec(&b.config);
    let batch = surface_batch(&b.config)?;
    let space = Subspace::new(&b.pretrained, &f, &s, spec.classifier_seed)?;
    let grid = loss_surface(&spec, &space, &batch)?;

    let mut p_params = b.pretrained.params.clone();
    reinit_classifier(&mut p_params, &pinned_classifier_stream(spec.classifier_seed))?;
    let cfg = &b.config.model;
    let corners_exact = grid.corners.origin.to_bits() == batch_loss(&p_params, cfg, &batch)?.to_bits()
        && grid.corners.finetuned.to_bits() == batch_loss(&f.params, cfg, &batch)?.to_bits()
        && grid.corners.second.to_bits() == batch_loss(&s.params, cfg, &batch)?.to_bits();
    let shape = grid.a.len() == 40
        && grid.b.len() == 40
        && grid.values.len() == 40
        && grid.values.iter().all(|r| r.len() == 40)
        && grid.a[0] == -1.5
        && grid.a[39] == 1.5
        && grid.b == grid.a;

    let reported = space.corners(Quantity::GradientNorm, &batch)?.second;
    let mut tape = Tape::new();
    let (loss, _) = classify_graph(&mut tape, &s.params, cfg, &batch.tokens, &batch.labels, Mode::Eval, None)?;
    let grads = tape.backward(loss)?;
    let independent = layer_gradient_norms(&grads, Granularity::Matrix).values().map(|n| n * n).sum::<f64>().sqrt();
    let grad_rel = rel(reported, independent);
    let isolated = space.evaluate_at(grid.a[7], grid.b[31], Quantity::Loss, &batch)?.to_bits() == grid.values[7][31].to_bits();
    outcome(
        corners_exact && shape && grad_rel <= 1e-6 && isolated && grid.non_finite() == 0,
        format!(
            "corners bitwise {corners_exact} (f(0,0)={:.6}, f(1,0)={:.6}, f(0,1)={:.6}); grid 40x40 on [-1.5, 1.5] {shape}; gradient norm at (0,1) {reported:.9} vs {independent:.9} (rel {grad_rel:.1e}); isolated point bitwise {isolated}",
            grid.corners.origin, grid.corners.finetuned, grid.corners.second
        ),
    )
}

fn criterion_9(bench: &Result<Bench>) -> Result<Outcome> {
    let b = bench.as_ref().map_err(|e| ftlab::LabError::invalid(e.to_string()))?;
    let unstable = b.sweep.cells.iter().find(|c| c.id == "devlin-default").expect("bundled cell present");
    let failed_seed = unstable
        .records
        .iter()
        .find(|r| r.failed)
        .map(|r| r.config.seed)
        .ok_or_else(|| ftlab::LabError::invalid("no failed run in the unstable cell"))?;
    let (_, ft) = finetune_from(&b.config, &b.pretrained, failed_seed, false, 3)?;
    let cfg = &b.config;
    let corpus = ftlab::data::generate_corpus(&cfg.data.grammar, ftlab::config::derive_seed(cfg.seed, "probe-corpus"), cfg.probe.eval_size)?;
    let policy = &cfg.pretrain.mask;
    let seed = cfg.probe.mask_seed;
    let curve = substitution_curve(&ft, &b.pretrained, &corpus, policy, seed)?;
    let l = cfg.model.num_layers;
    let k0 = curve.perplexity[0].to_bits() == heldout_perplexity(&ft.params, &cfg.model, &corpus, policy, seed)?.to_bits();
    let kl = curve.perplexity[l].to_bits() == heldout_perplexity(&b.pretrained.params, &cfg.model, &corpus, policy, seed)?.to_bits();
    let mut mask_constant = curve.mask == mask_hash(&fixed_mask_batches(&corpus, policy, cfg.model.vocab_size, seed)?);
    for k in 0..=l {
        let hybrid = ftlab::model::substitute_top_layers(&ft, &b.pretrained, k)?;
        let again = heldout_perplexity(&hybrid.params, &cfg.model, &corpus, policy, seed)?;
        mask_constant &= again.to_bits() == curve.perplexity[k].to_bits();
    }
    let direction = curve.perplexity[0] > curve.perplexity[l];
    let found: Vec<(String, f64)> = curve
        .perplexity
        .iter()
        .enumerate()
        .map(|(k, p)| (format!("forgetting.k{k}"), *p))
        .chain([("forgetting.seed".to_string(), failed_seed as f64)])
        .collect();
    let mismatches = anchor_mismatches(&found);
    outcome(
        curve.k.len() == l + 1 && k0 && kl && mask_constant && direction && mismatches.is_empty(),
        format!(
            "k=0 exact {k0}, k={l} exact {kl}, mask constant {mask_constant}; failed seed {failed_seed} perplexity {:.2} -> {:.2}; anchor mismatches: {mismatches:?}",
            curve.perplexity[0], curve.perplexity[l]
        ),
    )
}

fn tiny_overrides() -> Vec<String> {
    [
        "seed=5",
        "model.num_layers=1",
        "model.hidden_dim=8",
        "model.num_heads=2",
        "model.ffn_dim=16",
        "model.vocab_size=24",
        "model.max_seq_len=8",
        "data.grammar.vocab_size=24",
        "data.grammar.seq_len=8",
        "data.train_size=48",
        "data.dev_size=24",
        "run.epochs=1",
        "run.batch_size=8",
        "pretrain.total_iterations=20",
        "pretrain.batch_size=8",
        "pretrain.eval_every=10",
        "pretrain.corpus_size=64",
        "pretrain.heldout_size=16",
        "sweep.plan=\"paper-baseline-vs-devlin-default\"",
        "sweep.seeds=[0,1,2]",
        "surface.resolution=4",
        "surface.batch_size=16",
        "probe.eval_size=16",
    ]
    .map(String::from)
    .to_vec()
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| ftlab::LabError::io(&dir, e))? {
            let p = entry.map_err(|e| ftlab::LabError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| ftlab::LabError::io(&p, e))?;
                out.insert(p.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn criterion_10() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| ftlab::LabError::io("tempdir", e))?;
    let inputs = tmp.path().join("inputs");
    let base = ExperimentConfig::load(None, &tiny_overrides())?;
    let pre = command_pretrain(&base, &inputs)?.join(CHECKPOINT_FILE);
    let init = format!("run.init={:?}", pre.display().to_string());
    let with_init = ExperimentConfig::load(None, &[tiny_overrides(), vec![init.clone()]].concat())?;
    let ft_a = command_finetune(&with_init, &inputs.join("a"))?.join(CHECKPOINT_FILE);
    let with_seed = ExperimentConfig::load(None, &[tiny_overrides(), vec![init.clone(), "run.seed=9".into()]].concat())?;
    let ft_b = command_finetune(&with_seed, &inputs.join("b"))?.join(CHECKPOINT_FILE);
    let path = |k: &str, p: &Path| format!("{k}={:?}", p.display().to_string());
    let full = ExperimentConfig::load(
        None,
        &[
            tiny_overrides(),
            vec![
                init,
                path("surface.pretrained", &pre),
                path("surface.finetuned", &ft_a),
                path("surface.second", &ft_b),
                path("probe.pretrained", &pre),
                path("probe.finetuned", &ft_a),
                path("probe.run", ft_a.parent().expect("run dir")),
            ],
        ]
        .concat(),
    )?;
    let all = |out: &Path, workers: usize| -> Result<()> {
        command_pretrain(&full, out)?;
        command_finetune(&full, out)?;
        command_sweep(&full, out, workers)?;
        command_surface(&full, out)?;
        command_forgetting(&full, out)?;
        command_report(out, out)?;
        Ok(())
    };
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    all(&one, 1)?;
    all(&two, 1)?;
    let (f1, f2) = (files_under(&one)?, files_under(&two)?);
    let differing: Vec<_> = f1.iter().filter(|(k, v)| f2.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let repeat_ok = f1.len() == f2.len() && differing.is_empty();

    let four = tmp.path().join("four");
    command_sweep(&full, &four, 4)?;
    let s1 = files_under(&one.join("sweep"))?;
    let s4 = files_under(&four.join("sweep"))?;
    let workers_ok = s1 == s4;
    let plan = SweepPlan::from_config(&full)?;
    let init_ck = Checkpoint::load(&pre)?;
    let strip = |r: SweepResult| -> Vec<(String, Vec<f64>)> {
        r.cells.into_iter().map(|c| (c.id, c.records.iter().map(|r| r.final_metric).collect())).collect()
    };
    let in_memory = strip(run_sweep(&plan, &init_ck, 1)?) == strip(run_sweep(&plan, &init_ck, 4)?);
    outcome(
        repeat_ok && workers_ok && in_memory && f1.len() > 20,
        format!(
            "{} files byte-identical across repeats {repeat_ok} (differing: {differing:?}); sweep workers 1 vs 4 identical {}",
            f1.len(),
            workers_ok && in_memory
        ),
    )
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| filter.is_empty() || filter.contains(&n);
    let mut suite = Suite { results: Vec::new() };
    let cheap: [(u32, &str, Check); 8] = [
        (1, "bias-correction factor", criterion_1),
        (2, "adam oracle", criterion_2),
        (3, "gradient check", criterion_3),
        (4, "schedule anchors", criterion_4),
        (5, "iteration matching", criterion_5),
        (6, "failed-run rule", criterion_6),
        (7, "levene suite", criterion_7),
        (12, "metric fixtures", criterion_12),
    ];
    for (n, name, f) in cheap {
        if wanted(n) {
            suite.run(n, name, f);
        }
    }
    if wanted(10) {
        suite.run(10, "determinism", criterion_10);
    }
    if [8, 9, 11].iter().any(|&n| wanted(n)) {
        let start = Instant::now();
        let bench = (|| -> Result<Bench> {
            let config = benchmark_config()?;
            let tmp = tempfile::tempdir().map_err(|e| ftlab::LabError::io("tempdir", e))?;
            let ck = command_pretrain(&config, tmp.path())?.join(CHECKPOINT_FILE);
            let pretrained = Checkpoint::load(&ck)?;
            let sweep = run_sweep(&SweepPlan::from_config(&config)?, &pretrained, config.sweep.workers)?;
            Ok(Bench { config, pretrained, sweep })
        })();
        println!("pinned benchmark prepared in {:.1}s", start.elapsed().as_secs_f64());
        if wanted(11) {
            suite.run(11, "instability contrast", || criterion_11(&bench));
        }
        if wanted(8) {
            suite.run(8, "surface identities", || criterion_8(&bench));
        }
        if wanted(9) {
            suite.run(9, "substitution identities", || criterion_9(&bench));
        }
    }
    let unexpected: Vec<u32> = suite
        .results
        .iter()
        .filter(|(n, pass)| !pass && !KNOWN_UNATTAINABLE.contains(n))
        .map(|(n, _)| *n)
        .collect();
    let passed = suite.results.iter().filter(|(_, p)| *p).count();
    println!("acceptance: {passed}/{} criteria pass", suite.results.len());
    for (n, pass) in &suite.results {
        if !pass && KNOWN_UNATTAINABLE.contains(n) {
            println!("criterion {n} fails against its tabulated reference values (known; does not fail the target)");
        }
    }
    if !unexpected.is_empty() {
        eprintln!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}
