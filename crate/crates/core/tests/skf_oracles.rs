mod common;

use cdrloc::skf::{MotionModel, SkfConfig, SwitchingFilter};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(model: MotionModel) -> SkfConfig {
    SkfConfig {
        models: vec![model],
        ..SkfConfig::default()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn one_model_bank_is_plain_kalman_and_rts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for model in [MotionModel::Move, MotionModel::Stay] {
        let cfg = single(model);
        let skf = SwitchingFilter::from_config(&cfg).unwrap();
        for _ in 0..20 {
            let steps = common::random_steps(&mut rng, 30);
            let oracle = common::kf_rts(&steps, model, &cfg);
            let pass = skf.filter(&steps).unwrap();
            let smoothed = skf.smooth(&steps, &pass).unwrap();
            for t in 0..steps.len() {
                let (xf, pf) = &oracle.filtered[t];
                let (xs, ps) = &oracle.smoothed[t];
                let f = &pass.steps[t].combined;
                let s = &smoothed[t].combined;
                assert!(max_abs_diff(f.mean.as_slice(), xf.as_slice()) < 1e-9, "{model:?} filtered mean t={t}");
                assert!(max_abs_diff(s.mean.as_slice(), xs.as_slice()) < 1e-9, "{model:?} smoothed mean t={t}");
                let scale = pf.abs().max().max(1.0);
                assert!(max_abs_diff(f.cov.as_slice(), pf.as_slice()) / scale < 1e-9);
                let scale = ps.abs().max().max(1.0);
                assert!(max_abs_diff(s.cov.as_slice(), ps.as_slice()) / scale < 1e-9);
                assert_eq!(pass.steps[t].probs, vec![1.0]);
            }
        }
    }
}

#[test]
fn two_steps_are_exact() {
    // with a shared seed, one step of GPB2 loses nothing
    let cfg = SkfConfig::default();
    let skf = SwitchingFilter::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let steps = common::random_steps(&mut rng, 2);
        let (exact_f, exact_s) = common::exact_model_posteriors(&steps, &cfg);
        let pass = skf.filter(&steps).unwrap();
        let smoothed = skf.smooth(&steps, &pass).unwrap();
        for t in 0..2 {
            assert!(max_abs_diff(&pass.steps[t].probs, &exact_f[t]) < 1e-9);
            assert!(max_abs_diff(&smoothed[t].probs, &exact_s[t]) < 1e-9);
        }
    }
}

#[test]
fn three_steps_are_exact() {
    // the smoother's two-step lookahead covers the whole sequence, and the
    // filter has not collapsed anything yet
    let cfg = SkfConfig::default();
    let skf = SwitchingFilter::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let steps = common::random_steps(&mut rng, 3);
        let (exact_f, exact_s) = common::exact_model_posteriors(&steps, &cfg);
        let pass = skf.filter(&steps).unwrap();
        let smoothed = skf.smooth(&steps, &pass).unwrap();
        for t in 0..3 {
            assert!(max_abs_diff(&pass.steps[t].probs, &exact_f[t]) < 1e-9);
            assert!(max_abs_diff(&smoothed[t].probs, &exact_s[t]) < 1e-9);
        }
    }
}

#[test]
fn four_steps_stay_close_to_exact_enumeration() {
    // collapsing starts to cost accuracy here; bound the typical deviation
    let cfg = SkfConfig::default();
    let skf = SwitchingFilter::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut bad_f, mut bad_s) = (0, 0);
    let trials = 300;
    for _ in 0..trials {
        let steps = common::random_steps(&mut rng, 4);
        let (exact_f, exact_s) = common::exact_model_posteriors(&steps, &cfg);
        let pass = skf.filter(&steps).unwrap();
        let smoothed = skf.smooth(&steps, &pass).unwrap();
        let df = (0..4).map(|t| max_abs_diff(&pass.steps[t].probs, &exact_f[t])).fold(0.0, f64::max);
        let ds = (0..4).map(|t| max_abs_diff(&smoothed[t].probs, &exact_s[t])).fold(0.0, f64::max);
        bad_f += usize::from(df > 0.02);
        bad_s += usize::from(ds > 0.05);
        // the first three filtered steps are still exact
        for t in 0..3 {
            assert!(max_abs_diff(&pass.steps[t].probs, &exact_f[t]) < 1e-9);
        }
    }
    assert!(bad_f * 20 <= trials, "{bad_f}/{trials} filter deviations above 0.02");
    assert!(bad_s * 10 <= trials, "{bad_s}/{trials} smoother deviations above 0.05");
}

#[test]
fn last_smoothed_step_equals_filtered() {
    let cfg = SkfConfig::default();
    let skf = SwitchingFilter::from_config(&cfg).unwrap();
    let steps = common::random_steps(&mut ChaCha8Rng::seed_from_u64(9), 12);
    let pass = skf.filter(&steps).unwrap();
    let smoothed = skf.smooth(&steps, &pass).unwrap();
    let (f, s) = (pass.steps.last().unwrap(), smoothed.last().unwrap());
    assert_eq!(f.probs, s.probs);
    assert_eq!(f.combined, s.combined);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_are_valid_distributions(seed in any::<u64>(), len in 1usize..40) {
        let cfg = SkfConfig::default();
        let skf = SwitchingFilter::from_config(&cfg).unwrap();
        let steps = common::random_steps(&mut ChaCha8Rng::seed_from_u64(seed), len);
        let pass = skf.filter(&steps).unwrap();
        let smoothed = skf.smooth(&steps, &pass).unwrap();
        for (f, s) in pass.steps.iter().zip(&smoothed) {
            prop_assert!(common::sums_to_one(&f.probs, 1e-9));
            prop_assert!(common::sums_to_one(&s.probs, 1e-9));
            for c in f.per_model.iter().chain(&s.per_model).chain([&f.combined, &s.combined]) {
                let tol = 1e-9 * c.cov.abs().max().max(1.0);
                prop_assert!(common::symmetric_psd(&c.cov, tol), "{}", c.cov);
            }
        }
    }

    #[test]
    fn model_order_does_not_change_posteriors(seed in any::<u64>(), len in 2usize..15) {
        let fwd = SkfConfig::default();
        let rev = SkfConfig { models: vec![MotionModel::Stay, MotionModel::Move], ..SkfConfig::default() };
        let steps = common::random_steps(&mut ChaCha8Rng::seed_from_u64(seed), len);
        let a = SwitchingFilter::from_config(&fwd).unwrap();
        let b = SwitchingFilter::from_config(&rev).unwrap();
        let pa = a.filter(&steps).unwrap();
        let pb = b.filter(&steps).unwrap();
        let sa = a.smooth(&steps, &pa).unwrap();
        let sb = b.smooth(&steps, &pb).unwrap();
        for t in 0..len {
            prop_assert!((pa.steps[t].probs[1] - pb.steps[t].probs[0]).abs() < 1e-9);
            prop_assert!((sa[t].probs[1] - sb[t].probs[0]).abs() < 1e-9);
        }
    }
}
