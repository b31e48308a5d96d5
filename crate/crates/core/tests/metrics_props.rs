use ftlab::metrics::{levene_test, per_point_stability, summary_stats, performance_variance_stability, ConfusionCounts};
use proptest::prelude::*;

fn group_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3..8), 2..5)
}

proptest! {
    #[test]
    fn mcc_symmetric_under_class_swap(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 1u64..50) {
        let a = ConfusionCounts::new(tp, fp, tn, fn_).mcc().unwrap();
        let b = ConfusionCounts::new(tn, fn_, tp, fp).mcc().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn levene_shift_and_scale_invariant(g in group_strategy(), shift in -50.0f64..50.0, scale in 0.1f64..20.0) {
        let base = levene_test(&g).unwrap();
        prop_assume!(base.w.is_finite() && base.w > 1e-9 && base.w < 1e9);
        let moved: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| x * scale + shift).collect()).collect();
        let r = levene_test(&moved).unwrap();
        prop_assert!((r.w - base.w).abs() <= 1e-6 * base.w.max(1.0), "{} vs {}", r.w, base.w);
        prop_assert!((r.p - base.p).abs() <= 1e-6);
        prop_assert!((0.0..=1.0).contains(&r.p));
    }

    #[test]
    fn variance_matches_squared_std(v in prop::collection::vec(-5.0f64..5.0, 2..30)) {
        let s = summary_stats(&v).unwrap();
        let var = performance_variance_stability(&v).unwrap();
        prop_assert!((s.std * s.std - var).abs() < 1e-12);
    }

    #[test]
    fn per_point_bounded_and_permutation_invariant(
        m in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 2..8),
        rot in 0usize..5,
    ) {
        let s = per_point_stability(&m).unwrap();
        prop_assert!((0.0..=0.25).contains(&s));
        let mut runs = m.clone();
        runs.reverse();
        prop_assert!((per_point_stability(&runs).unwrap() - s).abs() < 1e-15);
        let points: Vec<Vec<bool>> = m.iter().map(|r| { let mut r = r.clone(); r.rotate_left(rot); r }).collect();
        prop_assert!((per_point_stability(&points).unwrap() - s).abs() < 1e-15);
    }
}
