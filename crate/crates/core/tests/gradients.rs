use ftlab::autodiff::{Tape, Var};
use ftlab::gradcheck::finite_difference_check;
use ftlab::model::{classify_graph, init_params, mlm_graph, MlmBatch, Mode, ModelConfig, TokenBatch};
use ftlab::rng::RngStream;
use ftlab::{ParamStore, Result, Tensor};

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = RngStream::root(seed);
    let mut p = ParamStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        p.insert(*name, Tensor::new(shape.to_vec(), data)).unwrap();
    }
    p
}

fn check<F>(f: F, p: &ParamStore<f64>)
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &'p ParamStore<f64>) -> Result<Var>,
{
    let r = finite_difference_check(f, p, 64, 1e-5, 3).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// Weighted sum so every output entry gets a distinct upstream gradient.
fn probe<'p>(tape: &mut Tape<'p, f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), w));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

#[test]
fn matmul_and_bias() {
    let p = random_store(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5])], 1);
    check(
        |t, p| {
            let a = t.param("a", p.require("a")?);
            let b = t.param("b", p.require("b")?);
            let c = t.param("c", p.require("c")?);
            let y = t.matmul(a, b, false)?;
            let y = t.add_bias(y, c)?;
            probe(t, y)
        },
        &p,
    );
}

#[test]
fn matmul_transposed() {
    let p = random_store(&[("a", &[2, 3, 4]), ("b", &[5, 4])], 2);
    check(
        |t, p| {
            let a = t.param("a", p.require("a")?);
            let b = t.param("b", p.require("b")?);
            let y = t.matmul(a, b, true)?;
            probe(t, y)
        },
        &p,
    );
}

#[test]
fn batch_matmul_both_layouts() {
    let p = random_store(&[("a", &[2, 3, 4]), ("b", &[2, 4, 3]), ("c", &[2, 5, 4])], 3);
    check(
        |t, p| {
            let a = t.param("a", p.require("a")?);
            let b = t.param("b", p.require("b")?);
            let c = t.param("c", p.require("c")?);
            let y = t.batch_matmul(a, b, false)?;
            let z = t.batch_matmul(a, c, true)?;
            let s1 = probe(t, y)?;
            let s2 = probe(t, z)?;
            t.add(s1, s2)
        },
        &p,
    );
}

#[test]
fn elementwise_and_activations() {
    let p = random_store(&[("x", &[3, 4]), ("y", &[3, 4])], 4);
    check(
        |t, p| {
            let x = t.param("x", p.require("x")?);
            let y = t.param("y", p.require("y")?);
            let m = t.mul(x, y)?;
            let g = t.gelu(m)?;
            let h = t.tanh(x)?;
            let s = t.add(g, h)?;
            let s = t.scale(s, 0.7)?;
            let sm = t.softmax(s)?;
            probe(t, sm)
        },
        &p,
    );
}

#[test]
fn layer_norm_all_inputs() {
    let p = random_store(&[("x", &[4, 6]), ("g", &[6]), ("o", &[6])], 5);
    check(
        |t, p| {
            let x = t.param("x", p.require("x")?);
            let g = t.param("g", p.require("g")?);
            let o = t.param("o", p.require("o")?);
            let y = t.layer_norm(x, g, o)?;
            probe(t, y)
        },
        &p,
    );
}

#[test]
fn embedding_gather_reshape_swap() {
    let p = random_store(&[("table", &[7, 4])], 6);
    check(
        |t, p| {
            let tab = t.param("table", p.require("table")?);
            let e = t.embedding(tab, &[1, 3, 3, 0, 6, 2])?;
            let r = t.reshape(e, &[1, 2, 3, 4])?;
            let s = t.swap_axes12(r)?;
            let s = t.reshape(s, &[6, 4])?;
            let g = t.gather_rows(s, &[5, 0, 0, 2])?;
            probe(t, g)
        },
        &p,
    );
}

#[test]
fn cross_entropy_and_mean() {
    let p = random_store(&[("logits", &[5, 3]), ("x", &[4])], 7);
    check(
        |t, p| {
            let l = t.param("logits", p.require("logits")?);
            let ce = t.cross_entropy(l, &[0, 2, 1, 1, 0])?;
            let x = t.param("x", p.require("x")?);
            let x2 = t.mul(x, x)?;
            let m = t.mean(x2)?;
            t.add(ce, m)
        },
        &p,
    );
}

#[test]
fn dropout_with_fixed_mask_is_linear() {
    let p = random_store(&[("x", &[20])], 8);
    check(
        |t, p| {
            let x = t.param("x", p.require("x")?);
            // Same seed on every evaluation, so the mask is fixed.
            let mut rng = RngStream::root(99);
            let y = t.dropout(x, 0.3, &mut rng)?;
            probe(t, y)
        },
        &p,
    );
}

fn tokens(cfg: &ModelConfig, batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = RngStream::root(seed);
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq).map(|_| rng.below(cfg.vocab_size)).collect())
        .collect();
    TokenBatch::from_rows(rows.iter().map(Vec::as_slice)).unwrap()
}

#[test]
fn default_transformer_classification_gradients() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 17).unwrap().cast::<f64>();
    let tb = tokens(&cfg, 2, 8, 5);
    let labels = [0usize, 1];
    let r = finite_difference_check(
        |tape, p| {
            let (loss, _) = classify_graph(tape, p, &cfg, &tb, &labels, Mode::Eval, None)?;
            Ok(loss)
        },
        &params,
        200,
        6e-3,
        11,
    )
    .unwrap();
    assert_eq!(r.checked, 200);
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn small_transformer_mlm_gradients() {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 20,
        max_seq_len: 8,
        dropout_p: 0.0,
        num_classes: 2,
    };
    // Larger weights keep every sampled gradient well above f64 noise.
    let mut params = init_params(&cfg, 3).unwrap().cast::<f64>();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= 4.0);
    }
    let batch = MlmBatch {
        input: tokens(&cfg, 2, 6, 9),
        positions: vec![1, 4, 7, 11],
        targets: vec![3, 0, 19, 8],
    };
    let r = finite_difference_check(
        |tape, p| mlm_graph(tape, p, &cfg, &batch, Mode::Eval, None),
        &params,
        120,
        1e-3,
        2,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradients_are_deterministic() {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 20,
        max_seq_len: 8,
        dropout_p: 0.1,
        num_classes: 2,
    };
    let params = init_params(&cfg, 3).unwrap();
    let tb = tokens(&cfg, 3, 8, 1);
    let run = || {
        let mut tape = Tape::new();
        let mut rng = RngStream::root(4).split("dropout");
        let (loss, _) =
            classify_graph(&mut tape, &params, &cfg, &tb, &[0, 1, 1], Mode::Train, Some(&mut rng))
                .unwrap();
        (tape.value(loss).item(), tape.backward(loss).unwrap())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.bit_eq(&g2));
}
