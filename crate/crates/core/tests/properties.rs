use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urwkv::erf::{high_contribution_ratio, ErfMap};
use urwkv::metrics::{dice, hd95, iou, Mask};
use urwkv::quadscan::{scan, unscan, ScanDirection};
use urwkv::tensor::{Tape, Tensor};
use urwkv::train::Split;

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (vec(any::<bool>(), h * w), vec(any::<bool>(), h * w))
            .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

fn direction() -> impl Strategy<Value = ScanDirection> {
    prop::sample::select(ScanDirection::ALL.to_vec())
}

proptest! {
    #[test]
    fn metric_bounds_and_identity((a, b) in mask_pair()) {
        let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(d >= j);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert_eq!(d, dice(&b, &a).unwrap());
    }

    #[test]
    fn hd95_is_symmetric((a, b) in mask_pair()) {
        match (hd95(&a, &b, (1.0, 1.0)), hd95(&b, &a, (1.0, 1.0))) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x, y);
                prop_assert!(x >= 0.0);
            }
            (Err(_), Err(_)) => prop_assert!(a.is_empty() || b.is_empty()),
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn hd95_of_a_mask_with_itself_is_zero((a, _) in mask_pair()) {
        prop_assume!(!a.is_empty());
        prop_assert_eq!(hd95(&a, &a, (1.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn ratio_is_monotone_in_threshold(
        field in vec(0.0f64..10.0, 1..64),
        t1 in 0.01f64..=1.0,
        t2 in 0.01f64..=1.0,
    ) {
        prop_assume!(field.iter().sum::<f64>() > 0.0);
        let map = ErfMap::from_field(1, field.len(), field).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (r_lo, r_hi) = (
            high_contribution_ratio(&map, lo).unwrap(),
            high_contribution_ratio(&map, hi).unwrap(),
        );
        prop_assert!(r_lo <= r_hi);
        prop_assert!(r_lo > 0.0 && r_hi <= 1.0);
    }

    #[test]
    fn ratio_is_scale_invariant(
        field in vec(0.0f64..10.0, 1..64),
        scale in 1e-3f64..1e3,
        t in 0.05f64..=1.0,
    ) {
        prop_assume!(field.iter().sum::<f64>() > 0.0);
        let n = field.len();
        let scaled: Vec<f64> = field.iter().map(|v| v * scale).collect();
        let a = ErfMap::from_field(1, n, field).unwrap();
        let b = ErfMap::from_field(1, n, scaled).unwrap();
        prop_assert_eq!(
            high_contribution_ratio(&a, t).unwrap(),
            high_contribution_ratio(&b, t).unwrap()
        );
    }

    #[test]
    fn scan_round_trips(h in 1usize..12, w in 1usize..12, c in 1usize..4, dir in direction(), seed: u64) {
        let x = Tensor::<f64>::randn([c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let seq = scan(&x, dir).unwrap();
        prop_assert_eq!(seq.shape(), &[h * w, c][..]);
        prop_assert_eq!(unscan(&seq, dir, h, w).unwrap(), x);
    }

    #[test]
    fn opposite_scans_are_reversals(h in 1usize..8, w in 1usize..8, dir in direction()) {
        let x = Tensor::<f32>::new([1, h, w], (0..h * w).map(|i| i as f32).collect()).unwrap();
        let fwd = scan(&x, dir).unwrap();
        let bwd = scan(&x, dir.reversed()).unwrap();
        let mut rev = bwd.data().to_vec();
        rev.reverse();
        prop_assert_eq!(fwd.data(), &rev[..]);
    }

    #[test]
    fn split_is_a_deterministic_partition(n in 2usize..300, frac in 0.05f64..0.95, seed: u64) {
        let s = Split::new(n, frac, seed);
        prop_assert_eq!(&s, &Split::new(n, frac, seed));
        prop_assert_eq!(s.hash(), Split::new(n, frac, seed).hash());
        prop_assert!(!s.train.is_empty() && !s.val.is_empty());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn soft_dice_vanishes_at_confident_correct_logits(bits in vec(any::<bool>(), 1..64)) {
        let target = Tensor::<f64>::new(
            [bits.len()],
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let loss_at = |mag: f64| {
            let logits = target.map(|t| if t > 0.5 { mag } else { -mag });
            let tape = Tape::new();
            let l = tape.constant(logits).soft_dice_loss(&target).unwrap();
            l.value().data()[0]
        };
        let (near, far) = (loss_at(5.0), loss_at(40.0));
        prop_assert!(far <= near + 1e-15);
        prop_assert!(far < 1e-9, "loss {far}");
    }
}
