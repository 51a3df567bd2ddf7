use mgl_core::frequency::{dct2, idct2};
use mgl_core::head_metrics::{auc, eer};
use mgl_core::Tensor;
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0u8..2, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
        )
    })
}

proptest! {
    #[test]
    fn auc_ignores_strictly_increasing_transforms((scores, labels) in scored_labels()) {
        let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
    }

    #[test]
    fn auc_of_negated_scores_is_the_complement((scores, labels) in scored_labels()) {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eer_stays_in_unit_interval((scores, labels) in scored_labels()) {
        let p = eer(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.eer));
        prop_assert!((p.eer - (p.far + p.frr) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dct_round_trip_is_identity(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform([h, w], -1.0, 1.0, &mut rng);
        let back = idct2(&dct2(&x).unwrap()).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }
}
