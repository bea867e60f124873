mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use seg2eye::autodiff::Tape;
use seg2eye::blocks::{instance_norm, EPS};
use seg2eye::domain::{to_disk, to_internal};
use seg2eye::losses::{challenge_metric_u8, gram_matrix};
use seg2eye::networks::aggregate_styles;
use seg2eye::ranking::{colorize_mask, mask_mse, rank_by_masks, ClassMeans};
use seg2eye::{RngSeed, SegMask, StyleCode};

fn codes(seed: u64, n: usize, d: usize) -> Vec<StyleCode> {
    let mut r = support::rng(seed);
    (0..n).map(|_| StyleCode(support::randn(&mut r, &[d], 1.0).data().iter().map(|&v| v as f32).collect())).collect()
}

fn means() -> ClassMeans {
    ClassMeans([0.3, 0.8, -0.2, -0.9])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_order_and_repeats(seed in any::<u64>(), n in 1usize..6, d in 1usize..9) {
        let cs = codes(seed, n, d);
        let agg = aggregate_styles(&cs).unwrap();
        let mut shuffled = cs.clone();
        shuffled.shuffle(&mut RngSeed(seed).rng());
        prop_assert_eq!(&aggregate_styles(&shuffled).unwrap(), &agg);
        let mut doubled = cs.clone();
        doubled.extend(cs.iter().cloned());
        prop_assert_eq!(&aggregate_styles(&doubled).unwrap(), &agg);
        for c in &cs {
            prop_assert!(c.values().iter().zip(agg.values()).all(|(a, m)| a <= m));
        }
    }

    #[test]
    fn challenge_metric_is_a_scaled_distance(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut r = support::rng(seed);
        let [a, b, c] = [0, 1, 2].map(|_| support::random_image(&mut r, h, w).to_u8());
        let d = |x: &[u8], y: &[u8]| challenge_metric_u8(x, y, h, w);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        prop_assert!((d(&a, &b) - support::oracle_challenge(&a, &b, h, w)).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_positive_semidefinite(seed in any::<u64>(), c in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let mut r = support::rng(seed);
        let f = support::randn(&mut r, &[1, c, h, w], 1.0);
        let v = support::randn(&mut r, &[c], 1.0);
        let tape = Tape::new();
        let g = gram_matrix(tape.constant(f)).value();
        let g = g.data();
        let mut quad = 0.0;
        for i in 0..c {
            for j in 0..c {
                prop_assert!((g[i * c + j] - g[j * c + i]).abs() < 1e-12);
                quad += v.data()[i] * g[i * c + j] * v.data()[j];
            }
        }
        prop_assert!(quad >= -1e-12);
    }

    #[test]
    fn instance_norm_standardizes_each_channel(seed in any::<u64>(), c in 1usize..4, hw in 2usize..6, scale in 0.1f64..10.0) {
        let mut r = support::rng(seed);
        let x = support::randn(&mut r, &[2, c, hw, hw], scale);
        let tape = Tape::new();
        let y = instance_norm(tape.constant(x.clone()), EPS).value();
        let n = hw * hw;
        let moments = |p: &[f64]| {
            let mean = p.iter().sum::<f64>() / n as f64;
            (mean, p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        };
        for (xp, yp) in x.data().chunks(n).zip(y.data().chunks(n)) {
            let (_, var_x) = moments(xp);
            let (mean, var) = moments(yp);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - var_x / (var_x + EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_mse_is_a_symmetric_dissimilarity(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut r = support::rng(seed);
        let (a, b) = (support::random_mask(&mut r, h, w), support::random_mask(&mut r, h, w));
        let (ca, cb) = (colorize_mask(&a, &means()), colorize_mask(&b, &means()));
        prop_assert_eq!(mask_mse(&ca, &ca).unwrap(), 0.0);
        prop_assert_eq!(mask_mse(&ca, &cb).unwrap(), mask_mse(&cb, &ca).unwrap());
        prop_assert_eq!(mask_mse(&ca, &cb).unwrap() == 0.0, a == b);
    }

    #[test]
    fn ranking_ignores_candidate_order(seed in any::<u64>(), n in 1usize..8) {
        let mut r = support::rng(seed);
        let target = support::random_mask(&mut r, 4, 4);
        let mut pool: Vec<(String, SegMask)> = (0..n).map(|i| (format!("c{i}"), support::random_mask(&mut r, 4, 4))).collect();
        let ranked = rank_by_masks(&target, &pool, &means()).unwrap();
        pool.shuffle(&mut RngSeed(seed).rng());
        prop_assert_eq!(&rank_by_masks(&target, &pool, &means()).unwrap(), &ranked);
        prop_assert!(ranked.0.windows(2).all(|w| w[0].score <= w[1].score));
        prop_assert!(ranked.0.iter().enumerate().all(|(i, e)| e.rank == i + 1));
    }

    #[test]
    fn disk_values_survive_conversion(v in any::<u8>()) {
        prop_assert_eq!(to_disk(to_internal(v)), v);
    }

    #[test]
    fn mirroring_is_an_involution(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let m = support::random_mask(&mut support::rng(seed), h, w);
        prop_assert_eq!(m.mirrored().mirrored(), m.clone());
        prop_assert_eq!(m.mirrored().class_histogram(), m.class_histogram());
    }
}
