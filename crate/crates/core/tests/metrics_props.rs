use proptest::prelude::*;

use unictr_core::metrics::{auc, rela_impr, MetricsReport};
use unictr_core::Error;

/// Pairwise definition: P(s+ > s-) + 0.5 P(s+ = s-).
fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn two_class() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..6).prop_map(f64::from), -1.0f64..1.0], n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
}

proptest! {
    #[test]
    fn rank_auc_matches_pairwise((s, y) in two_class()) {
        prop_assert_eq!(auc(&s, &y).unwrap(), pairwise(&s, &y));
    }

    #[test]
    fn monotone_transform_keeps_auc((s, y) in two_class()) {
        let t: Vec<f64> = s.iter().map(|v| 3.0 * v.tanh() + 1.0).collect();
        prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
    }

    #[test]
    fn flipping_labels_mirrors_auc((s, y) in two_class()) {
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let sum = auc(&s, &y).unwrap() + auc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rela_impr_is_zero_at_base(b in 0.51f64..0.99) {
        prop_assert!(rela_impr(b, b).unwrap().abs() < 1e-12);
    }
}

#[test]
fn single_class_is_undefined() {
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    let r = MetricsReport::from_scores(&[0.1, 0.2, 0.3, 0.9], &[0, 0, 0, 1], &["a", "a", "b", "b"]);
    assert_eq!(r.auc_of("a"), None);
    assert_eq!(r.auc_of("b"), Some(1.0));
}

#[test]
fn rela_impr_reference_value() {
    let v = rela_impr(0.7523, 0.7031).unwrap();
    assert!((v - 24.22).abs() < 0.01, "{v}");
    assert!(rela_impr(0.6, 0.5).is_err());
}
