use ftlab::data::{generate_classification_task, generate_corpus, GrammarSpec, MaskPolicy, TaskSpec};
use ftlab::forgetting::substitution_curve;
use ftlab::landscape::{gradient_norm_surface, loss_surface, EvalBatch, Subspace, SurfaceSpec};
use ftlab::model::{Checkpoint, ModelConfig};
use ftlab::LabError;
use proptest::prelude::*;

fn model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 24,
        max_seq_len: 8,
        dropout_p: 0.1,
        num_classes: 2,
    }
}

fn grammar() -> GrammarSpec {
    GrammarSpec { vocab_size: 24, seq_len: 8, ..GrammarSpec::default() }
}

fn batch() -> EvalBatch {
    let spec = TaskSpec { grammar: grammar(), train_size: 40, dev_size: 10, ..TaskSpec::default() };
    let (train, _) = generate_classification_task(&spec, 2).unwrap();
    EvalBatch::sample(&train, 16, 0).unwrap()
}

fn spec() -> SurfaceSpec {
    SurfaceSpec { range: [-1.0, 1.0], resolution: 5, batch_size: 16, classifier_seed: 3 }
}

#[test]
fn surface_is_symmetric_when_directions_coincide() {
    let p = Checkpoint::init(model(), 1).unwrap();
    let f = Checkpoint::init(model(), 2).unwrap();
    let space = Subspace::new(&p, &f, &f, 3).unwrap();
    let g = loss_surface(&spec(), &space, &batch()).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(g.values[i][j].to_bits(), g.values[j][i].to_bits(), "({i},{j})");
        }
    }
    assert_eq!(g.a, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    assert_eq!(g.corners.finetuned.to_bits(), g.corners.second.to_bits());
}

#[test]
fn surfaces_leave_checkpoints_untouched() {
    let p = Checkpoint::init(model(), 1).unwrap();
    let f = Checkpoint::init(model(), 2).unwrap();
    let s = Checkpoint::init(model(), 4).unwrap();
    let before: Vec<String> = [&p, &f, &s].iter().map(|c| c.content_hash()).collect();
    let space = Subspace::new(&p, &f, &s, 3).unwrap();
    let g = gradient_norm_surface(&spec(), &space, &batch()).unwrap();
    assert!(g.values.iter().flatten().all(|v| *v >= 0.0 && v.is_finite()));
    let after: Vec<String> = [&p, &f, &s].iter().map(|c| c.content_hash()).collect();
    assert_eq!(before, after);
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let p = Checkpoint::init(model(), 1).unwrap();
    let other = Checkpoint::init(ModelConfig { num_layers: 1, ..model() }, 2).unwrap();
    assert!(matches!(Subspace::new(&p, &other, &p, 0), Err(LabError::ConfigMismatch(_))));
    let corpus = generate_corpus(&grammar(), 0, 8).unwrap();
    assert!(matches!(
        substitution_curve(&other, &p, &corpus, &MaskPolicy::default(), 0),
        Err(LabError::ConfigMismatch(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn substitution_curve_is_pure_and_bounded(ft_seed in 0u64..50, mask_seed in 0u64..50) {
        let pt = Checkpoint::init(model(), 100).unwrap();
        let ft = Checkpoint::init(model(), ft_seed).unwrap();
        let corpus = generate_corpus(&grammar(), 9, 12).unwrap();
        let policy = MaskPolicy::default();
        let a = substitution_curve(&ft, &pt, &corpus, &policy, mask_seed).unwrap();
        let b = substitution_curve(&ft, &pt, &corpus, &policy, mask_seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.k.clone(), vec![0, 1, 2]);
        prop_assert!(a.perplexity.iter().all(|p| *p >= 1.0));
        let full = substitution_curve(&pt, &pt, &corpus, &policy, mask_seed).unwrap();
        prop_assert_eq!(a.perplexity[2].to_bits(), full.perplexity[0].to_bits());
        prop_assert_eq!(&a.mask, &full.mask);
    }
}
