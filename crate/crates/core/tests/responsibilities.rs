//! Responsibility and hard-negative invariants over random instances.

use ovmlr_core::autodiff::Tape;
use ovmlr_core::wps::{hard_negative_indices, responsibilities, smooth, wps_loss_image};
use ovmlr_core::Tensor;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<bool>, f64, f64)> {
    (1usize..12, 1usize..7).prop_flat_map(|(n_p, c)| {
        (
            Just(n_p),
            Just(c),
            prop::collection::vec(-1.0f64..1.0, n_p * c),
            prop::collection::vec(-1.0f64..1.0, n_p * c),
            prop::collection::vec(any::<bool>(), c),
            0.0f64..=1.0,
            prop_oneof![Just(1.0), Just(14.0), 0.1f64..50.0],
        )
    })
}

fn check_columns(z: &Tensor, labels: &[bool]) {
    for (j, &y) in labels.iter().enumerate() {
        let col = z.column(j);
        if y {
            let s: f64 = col.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "column {j} sums to {s}");
            assert!(col.iter().all(|&v| v >= 0.0));
        } else {
            assert!(col.iter().all(|&v| v == 0.0), "negative column {j} is not zero");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn columns_normalise((n_p, c, s, s_star, labels, lambda, scale) in instance()) {
        let s = Tensor::new(vec![n_p, c], s).unwrap();
        let s_star = Tensor::new(vec![n_p, c], s_star).unwrap();
        let z = responsibilities(&s, &labels, scale).unwrap();
        let z_star = responsibilities(&s_star, &labels, scale).unwrap();
        let z_prime = smooth(&z, &z_star, lambda).unwrap();
        check_columns(&z, &labels);
        check_columns(&z_star, &labels);
        check_columns(&z_prime, &labels);
        let at_one = smooth(&z, &z_star, 1.0).unwrap();
        let at_zero = smooth(&z, &z_star, 0.0).unwrap();
        prop_assert!(at_one.data().iter().zip(z_star.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(at_zero.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Scores of negatives outside the hard set never move the loss.
    #[test]
    fn unselected_negatives_are_inert((n_p, c, s, _s2, labels, _l, _sc) in instance(), k in 1usize..4, bump in -5.0f64..5.0) {
        let s = Tensor::new(vec![n_p, c], s).unwrap();
        let z = responsibilities(&s, &labels, 14.0).unwrap();
        let (hard, _) = hard_negative_indices(&s, &labels, k).unwrap();
        let loss = |scores: &Tensor| {
            let tape = Tape::new();
            wps_loss_image(tape.constant(scores.clone()), &z, &labels, &hard).unwrap().item()
        };
        let base = loss(&s);
        let mut moved = s.clone();
        for set in &hard {
            for i in (0..n_p).filter(|i| !set.patches.contains(i)) {
                moved.data_mut()[i * c + set.class] += bump;
            }
        }
        prop_assert_eq!(base.to_bits(), loss(&moved).to_bits());
    }
}

#[test]
fn hard_sets_are_the_top_scores() {
    let s = Tensor::from_rows(&[[0.1, 0.9], [0.7, 0.2], [0.4, 0.3], [0.6, -0.1]]);
    let (sets, clamped) = hard_negative_indices(&s, &[false, true], 2).unwrap();
    assert!(!clamped);
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].class, 0);
    assert_eq!(sets[0].patches, vec![1, 3]);
    assert!(hard_negative_indices(&s, &[false, true], 9).unwrap().1);
}
