//! Property tests for the cross-cutting invariants.

mod common;

use proptest::prelude::*;

use sscd_core::attention::{self, OffsetField};
use sscd_core::dataset::ChangeMask;
use sscd_core::metrics::{confusion, metrics, ConfusionCounts};
use sscd_core::optim::linear_decay_lr;
use sscd_core::tape::Tape;
use sscd_core::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax slices sum to 1 and the op is shift-invariant. Checked in
    /// f64 so that quantization of `x + c` itself (an input effect, not a
    /// softmax one) stays far below the 1e-6 bound; f32 stability at
    /// large magnitudes has its own unit test.
    #[test]
    fn softmax_normalizes_and_shifts_out(
        vals in proptest::collection::vec(-30.0f64..30.0, 2..24),
        shift in -50.0f64..50.0,
    ) {
        let n = vals.len();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(&[1, n], vals.clone()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);

        let shifted = tape.add_scalar(x, shift);
        let y2 = tape.softmax(shifted, 1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    /// Zero-offset shuffle visits each source pixel exactly once and the
    /// round trip is the identity.
    #[test]
    fn shuffle_is_a_bijection(
        seed in 0u64..1000,
        gamma_pow in 1u32..3,
    ) {
        use rand::{Rng, SeedableRng};
        let gamma = 1usize << gamma_pow;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let src = Tensor::from_fn(&[1, 2, 8, 8], |_| r.gen::<f32>());
        let mut tape: Tape<f32> = Tape::new();
        let f = tape.constant(src.clone());
        let offs = OffsetField {
            values: tape.constant(Tensor::zeros(&[1, 2, 8, 8])),
            clip: 1.0,
        };
        let subs = attention::sparse_shuffle(&mut tape, f, &offs, gamma).unwrap();
        // Partition: the multiset of subset values equals the source values.
        let mut got: Vec<u32> = tape.value(subs.stacked).data().iter().map(|v| v.to_bits()).collect();
        let mut want: Vec<u32> = src.data().iter().map(|v| v.to_bits()).collect();
        got.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(got, want);

        let back = attention::unshuffle(&mut tape, &subs).unwrap();
        prop_assert_eq!(tape.value(back).data(), src.data());
    }

    /// Confusion counts always partition the pixel set, commute with
    /// complementing both masks, and satisfy the F1-IoU identity.
    #[test]
    fn confusion_partition_and_identity(
        bits in proptest::collection::vec(0u8..2, 64),
        bits2 in proptest::collection::vec(0u8..2, 64),
    ) {
        let pred = ChangeMask::from_values(8, 8, bits.clone()).unwrap();
        let gt = ChangeMask::from_values(8, 8, bits2.clone()).unwrap();
        let c = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), 64);

        let inv = |v: &[u8]| v.iter().map(|&x| 1 - x).collect::<Vec<u8>>();
        let ci = confusion(
            &ChangeMask::from_values(8, 8, inv(&bits)).unwrap(),
            &ChangeMask::from_values(8, 8, inv(&bits2)).unwrap(),
        ).unwrap();
        prop_assert_eq!(c.true_pos, ci.true_neg);
        prop_assert_eq!(c.false_pos, ci.false_neg);

        let m = metrics(&c).unwrap();
        if m.iou > 0.0 {
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        }
    }

    /// The schedule is non-increasing and starts at lr0.
    #[test]
    fn lr_schedule_monotone(total in 1usize..500, lr0 in 1e-6f64..1.0) {
        prop_assert_eq!(linear_decay_lr(0, total, lr0).unwrap(), lr0);
        let mut prev = f64::INFINITY;
        for e in 0..total {
            let lr = linear_decay_lr(e, total, lr0).unwrap();
            prop_assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    /// Arbitrary confusion counts produce scores in [0, 1].
    #[test]
    fn metric_ranges(tp in 0u64..10_000, fp in 0u64..10_000, fneg in 0u64..10_000, tneg in 1u64..10_000) {
        let m = metrics(&ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fneg,
            true_neg: tneg,
        }).unwrap();
        for v in [m.f1, m.iou, m.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 + 1e-12 >= m.iou, "f1 {} < iou {}", m.f1, m.iou);
    }
}
