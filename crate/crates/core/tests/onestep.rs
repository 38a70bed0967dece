use fusionest::data::{FusedDataset, FusionSpec, ObservationRecord};
use fusionest::estimands::{EstimandSpec, LongitudinalModel, ZFamily};
use fusionest::onestep::{longitudinal, one_step, wald_ci, OneStepOptions};
use fusionest::simulate::dgp::{LongitudinalDgp, Scenario, T};
use fusionest::stats::weighted_mean;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn mean_dataset(n: usize, seed: u64) -> FusedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|_| {
            let mut r = ObservationRecord::from_reals(&[3.0 + 2.0 * normal(&mut rng)], 1);
            r.w = rng.random_range(0.5..2.0);
            r
        })
        .collect();
    FusedDataset::new(recs, FusionSpec::single_source(1))
}

/// Covariate, randomized assignment, uptake equal to assignment, outcome.
fn compliance_dataset(n: usize, seed: u64) -> FusedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|_| {
            let x = normal(&mut rng);
            let a = rng.random_bool(0.5) as u8 as f64;
            let y = x + 2.0 * a + 0.5 * normal(&mut rng);
            ObservationRecord::from_reals(&[x, a, a, y], 1)
        })
        .collect();
    FusedDataset::new(recs, FusionSpec::new(4, 1, vec![(1, vec![1]), (3, vec![1]), (4, vec![1])]))
}

const MEAN: EstimandSpec = EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 1 } };

#[test]
fn mean_estimate_is_weighted_sample_mean() {
    let ds = mean_dataset(500, 1);
    let y: Vec<f64> = ds.records.iter().map(|r| r.get(1).unwrap()).collect();
    let w: Vec<f64> = ds.records.iter().map(|r| r.w).collect();
    let target = weighted_mean(&y, &w);
    for folds in [1, 2, 5] {
        let mut opts = OneStepOptions::default();
        opts.nuisance.folds = folds;
        let rep = one_step(&ds, &MEAN, &opts).unwrap();
        assert!((rep.estimate[0] - target).abs() <= 1e-13 * target.abs(), "{folds}: {} vs {target}", rep.estimate[0]);
    }
}

#[test]
fn report_intervals_and_if_means_are_consistent() {
    let ds = compliance_dataset(400, 2);
    let rep = one_step(&ds, &EstimandSpec::IttAte, &OneStepOptions::default()).unwrap();
    let z = 1.959963984540054;
    let half = 0.5 * (rep.ci[0].hi - rep.ci[0].lo);
    assert!((0.5 * (rep.ci[0].hi + rep.ci[0].lo) - rep.estimate[0]).abs() < 1e-12);
    assert!((half - z * rep.se[0]).abs() < 1e-12);
    let col: Vec<f64> = rep.if_values.iter().map(|r| r[0]).collect();
    let w: Vec<f64> = ds.records.iter().map(|r| r.w).collect();
    assert_eq!(weighted_mean(&col, &w), rep.diagnostics.if_check.if_mean[0]);
    assert_eq!(rep.covariance[0][0], rep.se[0] * rep.se[0]);
    assert_eq!(rep.if_values.len(), ds.len());
}

#[test]
fn wald_interval_examples() {
    let ci = wald_ci(&[1.5], &[vec![0.0]], 0.95);
    assert_eq!((ci[0].lo, ci[0].hi), (1.5, 1.5));
    let ci = wald_ci(&[0.0], &[vec![1.0]], 0.95);
    assert!((ci[0].hi - 1.959963984540054).abs() < 1e-9);
    assert_eq!(ci[0].lo, -ci[0].hi);
}

#[test]
fn cate_equals_itt_under_full_compliance() {
    let ds = compliance_dataset(600, 3);
    let opts = OneStepOptions::default();
    let itt = one_step(&ds, &EstimandSpec::IttAte, &opts).unwrap();
    let cate = one_step(&ds, &EstimandSpec::Cate, &opts).unwrap();
    assert!((itt.estimate[0] - cate.estimate[0]).abs() < 1e-9, "{} vs {}", itt.estimate[0], cate.estimate[0]);
    assert!((itt.se[0] - cate.se[0]).abs() < 1e-9);
}

#[test]
fn constant_outcome_has_zero_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let recs = (0..300)
        .map(|_| {
            let u = normal(&mut rng);
            let a = rng.random_bool(0.5) as u8 as f64;
            ObservationRecord::from_reals(&[u, a, 7.0], 1)
        })
        .collect();
    let ds = FusedDataset::new(recs, FusionSpec::new(3, 1, vec![(1, vec![1]), (3, vec![1])]));
    let models = [LongitudinalModel::Nonparametric, LongitudinalModel::Linear { kappa: Default::default(), nu: 3.0 }];
    for rep in longitudinal(&ds, 2, &models, &OneStepOptions::default()).unwrap() {
        assert!(rep.estimate[0].abs() < 1e-9, "{:?}: {}", rep.model, rep.estimate[0]);
        assert!(rep.se[0] < 1e-9);
    }
}

#[test]
fn disjoint_supports_are_reported_off_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut recs = Vec::new();
    for s in 1..=2 {
        for _ in 0..300 {
            let x = normal(&mut rng) + if s == 2 { 12.0 } else { 0.0 };
            let y = x + normal(&mut rng);
            recs.push(if s == 1 { ObservationRecord::new(vec![fusionest::data::Value::real(x), fusionest::data::Value::Missing], 1) } else { ObservationRecord::from_reals(&[x, y], 2) });
        }
    }
    let ds = FusedDataset::new(recs, FusionSpec::new(2, 2, vec![(1, vec![1]), (2, vec![2])]));
    let est = EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 2 } };
    let rep = one_step(&ds, &est, &OneStepOptions::default()).unwrap();
    let c = &rep.diagnostics.clipping;
    assert!(c.off_support_rate > 0.95, "{c:?}");
}

#[test]
fn longitudinal_layout_keeps_clip_rate_low() {
    let ds = LongitudinalDgp::default().generate(Scenario::Complete, 6, 0).unwrap();
    let mut opts = OneStepOptions::default();
    opts.nuisance.outcome_learner = fusionest::nuisance::Learner::Linear { basis: fusionest::nuisance::Basis::Pairwise };
    let rep = longitudinal(&ds, T, &[LongitudinalModel::Nonparametric], &opts).unwrap().remove(0);
    assert!(rep.diagnostics.clipping.rate < 0.05, "{:?}", rep.diagnostics.clipping);
    assert!(rep.estimate[0].is_finite() && rep.se[0] > 0.0);
    assert_eq!(rep.diagnostics.stability.fold_estimates.len(), 2);
    assert!(rep.diagnostics.stability.remainder_proxy.is_some());
}

#[test]
fn semiparametric_gradient_has_smaller_standard_error_at_large_n() {
    let dgp = LongitudinalDgp::default();
    let ds = dgp.scaled(100_000.0 / dgp.n() as f64).generate(Scenario::Complete, 7, 0).unwrap();
    let mut opts = OneStepOptions::default();
    opts.nuisance.outcome_learner = fusionest::nuisance::Learner::Linear { basis: fusionest::nuisance::Basis::Pairwise };
    let models = [LongitudinalModel::Nonparametric, LongitudinalModel::Linear { kappa: Default::default(), nu: 3.0 }];
    let reps = longitudinal(&ds, T, &models, &opts).unwrap();
    let (lifted, canonical) = (reps[0].se[0], reps[1].se[0]);
    assert!(canonical < 0.99 * lifted, "canonical {canonical} vs lifted {lifted}");
}

fn scaled(ds: &FusedDataset, c: f64) -> FusedDataset {
    let mut out = ds.clone();
    out.records.iter_mut().for_each(|r| r.w *= c);
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weight_scaling_leaves_report_unchanged(c in 0.01f64..100.0, seed in 0u64..1000) {
        let ds = compliance_dataset(120, seed);
        let full = ds.with_spec(FusionSpec::single_source(4));
        let opts = OneStepOptions::default();
        for (ds, est) in [(ds, EstimandSpec::IttAte), (full, EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 4 } })] {
            let a = one_step(&ds, &est, &opts).unwrap();
            let b = one_step(&scaled(&ds, c), &est, &opts).unwrap();
            prop_assert!(close(a.estimate[0], b.estimate[0]), "{} vs {}", a.estimate[0], b.estimate[0]);
            prop_assert!(close(a.covariance[0][0], b.covariance[0][0]));
            prop_assert!(close(a.ci[0].lo, b.ci[0].lo) && close(a.ci[0].hi, b.ci[0].hi));
        }
    }

    #[test]
    fn covariance_is_symmetric_psd(seed in 0u64..1000) {
        let ds = compliance_dataset(150, seed).with_spec(FusionSpec::single_source(4));
        let est = EstimandSpec::ZEstimation { family: ZFamily::LeastSquares { outcome: 4, covariates: vec![1, 2] } };
        let rep = one_step(&ds, &est, &OneStepOptions::default()).unwrap();
        let m = nalgebra::DMatrix::from_fn(3, 3, |i, j| rep.covariance[i][j]);
        prop_assert!((m.clone() - m.transpose()).abs().max() < 1e-15);
        prop_assert!(m.symmetric_eigenvalues().iter().all(|&v| v > -1e-12));
    }
}
