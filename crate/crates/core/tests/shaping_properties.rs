mod common;

use ces_core::policy::{entropy_bits, Architecture, FeatureMap, PolicyParams};
use ces_core::rollout::group_statistics;
use ces_core::shaping::{shape_with_rollout_entropy, ShapingConfig, ShapingMode};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn config(mode: ShapingMode, tau: f64) -> ShapingConfig {
    ShapingConfig {
        tau,
        beta1: 0.4,
        beta2: 0.7,
        mode,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_reference_shaping(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let g = random_group(&mut rng(seed));
        let plan = shape_with_rollout_entropy(&batch_of(&g), &config(ShapingMode::FullCes, tau)).unwrap();
        let want = reference_shaping(&g, tau, 0.4, 0.7);
        for (rp, w) in plan.responses.iter().zip(&want) {
            for (a, b) in rp.shaped.iter().zip(w) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn direction_and_count(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let g = random_group(&mut rng(seed));
        let batch = batch_of(&g);
        let plan = shape_with_rollout_entropy(&batch, &config(ShapingMode::FullCes, tau)).unwrap();
        for (i, rp) in plan.responses.iter().enumerate() {
            let len = g.entropies[i].len();
            let b = if g.r_acc[i] == 1 { batch.accuracy } else { 1.0 - batch.accuracy };
            prop_assert_eq!(rp.selected.len(), (((len as f64) * tau * b).floor() as usize).min(len));
            for j in 0..len {
                let h = g.entropies[i][j];
                let moved = rp.shaped[j] - rp.base;
                if rp.selected.contains(&j) && h > 0.0 {
                    let down = moved < 0.0;
                    prop_assert_eq!(down, g.r_acc[i] == 1);
                    prop_assert!(moved != 0.0);
                } else {
                    prop_assert_eq!(moved, 0.0);
                }
            }
        }
    }

    #[test]
    fn selection_takes_the_largest_entropies(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let g = random_group(&mut rng(seed));
        let plan = shape_with_rollout_entropy(&batch_of(&g), &config(ShapingMode::RemoveAcc, tau)).unwrap();
        for (rp, hs) in plan.responses.iter().zip(&g.entropies) {
            prop_assert!(rp.selected.windows(2).all(|w| w[0] < w[1]));
            let floor = rp.selected.iter().map(|&j| hs[j]).fold(f64::INFINITY, f64::min);
            for (j, h) in hs.iter().enumerate() {
                if !rp.selected.contains(&j) {
                    prop_assert!(*h <= floor);
                }
            }
        }
    }

    #[test]
    fn full_equals_remove_acc_on_uniform_outcomes(seed in any::<u64>(), tau in 0.0f64..1.0, correct in any::<bool>()) {
        let mut g = random_group(&mut rng(seed));
        g.r_acc.iter_mut().for_each(|r| *r = correct as u8);
        let batch = batch_of(&g);
        let full = shape_with_rollout_entropy(&batch, &config(ShapingMode::FullCes, tau)).unwrap();
        let rem = shape_with_rollout_entropy(&batch, &config(ShapingMode::RemoveAcc, tau)).unwrap();
        for (a, b) in full.responses.iter().zip(&rem.responses) {
            prop_assert_eq!(&a.shaped, &b.shaped);
            prop_assert_eq!(&a.selected, &b.selected);
        }
    }

    #[test]
    fn off_is_identity_and_detach_matches_full_values(seed in any::<u64>(), tau in 0.0f64..1.0) {
        let g = random_group(&mut rng(seed));
        let batch = batch_of(&g);
        let off = shape_with_rollout_entropy(&batch, &config(ShapingMode::Off, tau)).unwrap();
        for (rp, &a) in off.responses.iter().zip(&batch.advantages) {
            prop_assert!(rp.shaped.iter().all(|&s| s == a));
        }
        let full = shape_with_rollout_entropy(&batch, &config(ShapingMode::FullCes, tau)).unwrap();
        let det = shape_with_rollout_entropy(&batch, &config(ShapingMode::Detach, tau)).unwrap();
        prop_assert!(full.gradient_flow && !det.gradient_flow);
        for (a, b) in full.responses.iter().zip(&det.responses) {
            prop_assert_eq!(&a.shaped, &b.shaped);
        }
    }

    #[test]
    fn entropy_bonus_raises_every_token(seed in any::<u64>()) {
        let g = random_group(&mut rng(seed));
        let batch = batch_of(&g);
        let plan = shape_with_rollout_entropy(&batch, &config(ShapingMode::EntropyAdv, 0.1)).unwrap();
        for (rp, hs) in plan.responses.iter().zip(&g.entropies) {
            for (s, h) in rp.shaped.iter().zip(hs) {
                prop_assert!((s - (rp.base + 0.7 * h)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn advantages_are_centred(r_acc in prop::collection::vec(0u8..=1, 2..12), seed in any::<u64>()) {
        let mut r = rng(seed);
        let r_fmt: Vec<u8> = r_acc.iter().map(|_| r.random_bool(0.5) as u8).collect();
        let rewards: Vec<u8> = r_acc.iter().zip(&r_fmt).map(|(a, f)| a + f).collect();
        let (a, adv) = group_statistics::<f64>(&r_acc, &rewards);
        prop_assert!((a - r_acc.iter().map(|&x| x as f64).sum::<f64>() / r_acc.len() as f64).abs() < 1e-15);
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
        if rewards.iter().all(|&x| x == rewards[0]) {
            prop_assert!(adv.iter().all(|&x| x == 0.0));
        } else {
            let var = adv.iter().map(|x| x * x).sum::<f64>() / adv.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_is_bounded(logits in prop::collection::vec(-20.0f64..20.0, 2..12)) {
        let v = logits.len();
        let fm = FeatureMap::new(v, 1, 1, 4);
        let mut p = PolicyParams::<f64>::zeros(Architecture::Linear, v, fm.dim(), 1.0);
        // the bucket feature is always on, so its column sets the logits
        for (k, l) in logits.iter().enumerate() {
            p.weights[k * fm.dim() + fm.window * v] = *l;
        }
        let d = p.distribution(&fm.features(&[0], 0)).unwrap();
        let h = d.entropy_bits();
        prop_assert!(h >= 0.0 && h <= (v as f64).log2() + 1e-12);
        prop_assert!((h - entropy_bits(&d.probs)).abs() < 1e-12);
    }
}

#[test]
fn ten_thousand_groups_keep_the_invariants() {
    let mut r = rng(2024);
    for _ in 0..10_000 {
        let g = random_group(&mut r);
        let tau = r.random_range(0.0..1.0);
        let plan = shape_with_rollout_entropy(&batch_of(&g), &config(ShapingMode::FullCes, tau)).unwrap();
        let want = reference_shaping(&g, tau, 0.4, 0.7);
        for (rp, w) in plan.responses.iter().zip(&want) {
            assert!(rp.shaped.iter().zip(w).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }
}
