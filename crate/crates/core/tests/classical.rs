mod common;

use common::*;
use fusionest::estimands::{EstimandSpec, ZFamily};

#[test]
fn canonical_gradients_match_classical_influence_functions() {
    for (name, dev) in classical_deviations() {
        assert!(dev < 1e-8, "{name}: deviation {dev:e}");
    }
}

#[test]
fn off_policy_on_logging_policy_keeps_action_centring_term() {
    let (literal, full) = ope_on_policy_deviations(false);
    assert!(full < 1e-12, "deviation {full:e}");
    assert!(literal > 1e-3, "action effect should leave v(z1) - mu(z1, z2), got {literal:e}");
}

#[test]
fn off_policy_on_logging_policy_is_centred_reward_without_action_effect() {
    let (literal, _) = ope_on_policy_deviations(true);
    assert!(literal < 1e-12, "deviation {literal:e}");
}

#[test]
fn classical_values_match_identified_functionals() {
    let m = random_model(itt_grid(), 1, None);
    let phi = EstimandSpec::IttAte.functional().unwrap().phi(&m).unwrap()[0];
    assert!((phi - aipw_itt(&m).0).abs() < 1e-12);

    let m = random_model(qte_grid(), 3, None);
    let phi = EstimandSpec::QuantileTe { tau: 0.3, width: QTE_WIDTH }.functional().unwrap().phi(&m).unwrap()[0];
    assert!((phi - qte_if(&m, 0.3).0).abs() < 1e-10);

    let m = random_model(ls_grid(), 6, None);
    let est = EstimandSpec::ZEstimation { family: ZFamily::LeastSquares { outcome: 3, covariates: vec![1, 2] } };
    let phi = est.functional().unwrap().phi(&m).unwrap();
    assert!(max_abs_diff(&phi, &ls_if(&m).0) < 1e-10);
}

#[test]
fn classical_influence_functions_are_centred() {
    let m = random_model(itt_grid(), 11, None);
    assert!(m.expect(&aipw_itt(&m).1).abs() < 1e-12);
    let m = random_model(ls_grid(), 12, None);
    for d in ls_if(&m).1 {
        assert!(m.expect(&d).abs() < 1e-12);
    }
}

#[test]
fn remainder_is_second_order() {
    let eps = [0.2, 0.1, 0.05];
    for id in ["itt", "ope"] {
        let r = remainders(id, 5, &eps);
        let slope = loglog_slope(&eps, &r);
        assert!((slope - 2.0).abs() <= 0.2, "{id}: slope {slope}, remainders {r:?}");
    }
}
