mod common;

use ces_core::objective::{norm, objective_gradient, objective_value, ClipConfig};
use ces_core::policy::Architecture;
use ces_core::shaping::ShapingMode;
use common::*;

fn check_mode(mode: ShapingMode, arch: Architecture, seed: u64) {
    let clip = ClipConfig::default();
    let config = shaping(mode);
    let mut rng = rng(seed);
    let mut checked = 0;
    while checked < 20 {
        let rig = random_rig(arch, &mut rng, None);
        let plans = plans_at(&rig, &config);
        if near_kink(&rig, &plans, &clip) {
            continue;
        }
        let (value, grad) = objective_gradient(&rig.batches, &plans, &rig.params, &clip).unwrap();
        assert_eq!(value, objective_value(&rig.batches, &plans, &rig.params, &clip).unwrap());
        let fd = finite_difference(&rig, &plans, &clip, 1e-5);
        let err = relative_error(&grad, &fd);
        assert!(err < 1e-4, "{mode:?} {arch:?}: relative error {err:e}");
        checked += 1;
    }
}

#[test]
fn every_mode_matches_finite_differences_linear() {
    for (i, mode) in ShapingMode::ALL.into_iter().enumerate() {
        check_mode(mode, Architecture::Linear, 100 + i as u64);
    }
}

#[test]
fn every_mode_matches_finite_differences_hidden() {
    for (i, mode) in ShapingMode::ALL.into_iter().enumerate() {
        check_mode(mode, Architecture::Hidden { units: 6 }, 200 + i as u64);
    }
}

#[test]
fn rigs_stay_small() {
    let mut r = rng(1);
    for arch in [Architecture::Linear, Architecture::Hidden { units: 6 }] {
        let rig = random_rig(arch, &mut r, None);
        assert!(rig.params.len() <= 1000, "{}", rig.params.len());
        assert!(rig.fmap.vocab_size <= 12);
    }
}

#[test]
fn detach_equals_frozen_entropy_gradient() {
    let clip = ClipConfig::default();
    let mut r = rng(7);
    for _ in 0..30 {
        let rig = random_rig(Architecture::Hidden { units: 6 }, &mut r, Some(vec![1, 0, 1]));
        let plans = plans_at(&rig, &shaping(ShapingMode::Detach));
        let (_, g) = objective_gradient(&rig.batches, &plans, &rig.params, &clip).unwrap();
        let want = frozen_gradient(&rig, &plans, &clip);
        let diff: Vec<f64> = g.iter().zip(&want).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) < 1e-10, "{}", norm(&diff));
    }
}

#[test]
fn off_gradient_is_the_score_function_estimator() {
    let clip = ClipConfig::default();
    let mut r = rng(8);
    for _ in 0..30 {
        let rig = random_rig(Architecture::Linear, &mut r, None);
        let plans = plans_at(&rig, &shaping(ShapingMode::Off));
        let (_, g) = objective_gradient(&rig.batches, &plans, &rig.params, &clip).unwrap();
        let want = frozen_gradient(&rig, &plans, &clip);
        let diff: Vec<f64> = g.iter().zip(&want).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) < 1e-12);
    }
}

#[test]
fn f32_gradient_tracks_f64() {
    use ces_core::policy::PolicyParams;
    let mut r = rng(9);
    let rig = random_rig(Architecture::Hidden { units: 6 }, &mut r, None);
    let rec = &rig.batches[0].responses[0].records[0];
    let p32: PolicyParams<f32> = PolicyParams::from_weights(
        rig.params.arch(),
        rig.params.vocab_size(),
        rig.params.feature_dim(),
        rig.params.weights.iter().map(|&w| w as f32).collect(),
        1.0,
    )
    .unwrap();
    let g64 = rig.params.grad_entropy_bits(&rec.features).unwrap();
    let g32 = p32.grad_entropy_bits(&rec.features).unwrap();
    let g32: Vec<f64> = g32.into_iter().map(f64::from).collect();
    assert!(relative_error(&g64, &g32) < 1e-4);
}
