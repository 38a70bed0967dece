use fusionest::data::Value;
use fusionest::estimands::LongitudinalModel;
use fusionest::longitudinal::{Layout, LinearFit};
use fusionest::simulate::dgp::{rep_rng, target_mvn, true_effect, LongitudinalDgp, Scenario, K, OBSERVED, SIZES};
use fusionest::simulate::monte_carlo::{run_monte_carlo, MonteCarloConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn column(recs: &[fusionest::data::ObservationRecord], s: usize, j: usize, keep: impl Fn(&[f64]) -> bool) -> Vec<f64> {
    recs.iter()
        .filter(|r| r.s == s)
        .filter_map(|r| {
            let z: Vec<f64> = (1..=j).map(|m| r.get(m).unwrap()).collect();
            keep(&z).then(|| z[j - 1])
        })
        .collect()
}

#[test]
fn source_sizes_and_observed_prefixes() {
    let recs = LongitudinalDgp::default().records(&mut rep_rng(1, 0)).unwrap();
    for s in 1..=K {
        let rows: Vec<_> = recs.iter().filter(|r| r.s == s).collect();
        assert_eq!(rows.len(), SIZES[s - 1]);
        for r in rows {
            for (j, v) in r.z.iter().enumerate() {
                assert_eq!(v.is_missing(), j >= OBSERVED[s - 1], "source {s} slot {}", j + 1);
            }
        }
    }
    assert!(matches!(recs[0].z[0], Value::Real(_)));
}

#[test]
fn marginals_match_the_generating_laws() {
    let dgp = LongitudinalDgp::default().scaled(5.0);
    let recs = dgp.records(&mut rep_rng(2, 0)).unwrap();
    let within = |x: &[f64], mu: f64, sd: f64| {
        let (m, _) = mean_sd(x);
        let se = sd / (x.len() as f64).sqrt();
        assert!((m - mu).abs() < 4.0 * se, "mean {m} vs {mu} (se {se})");
    };
    // On-target U_1 is N(0, 1); sources 2 and 4 draw N(3, 2).
    within(&column(&recs, 9, 1, |_| true), 0.0, 1.0);
    within(&column(&recs, 2, 1, |_| true), 3.0, 2f64.sqrt());
    let a1 = column(&recs, 6, 2, |_| true);
    within(&a1, 0.5, 0.5);
    // Target U_3 | A_1 = A_2 = 1 has mean 40 and variance 4 marginally.
    let u3 = column(&recs, 9, 5, |z| z[1] == 1.0 && z[3] == 1.0);
    let (mu, sig) = target_mvn(1, 1);
    within(&u3, mu[2], sig[(2, 2)].sqrt());
    let (_, sd) = mean_sd(&u3);
    assert!((sd - 2.0).abs() < 0.1, "{sd}");
    // Source 7: U_1 ~ N(3, 2), U_2 from the target (mean 1 + 0.8 U_1), and
    // U_3 off-target with mean −10 + 0.71 U_1 + 0.12 U_2 for A = (0, 1).
    let off = column(&recs, 7, 5, |z| z[1] == 0.0 && z[3] == 1.0);
    let (m, _) = mean_sd(&off);
    assert!((m - (-10.0 + 0.71 * 3.0 + 0.12 * 3.4)).abs() < 0.15, "{m}");
}

#[test]
fn generation_is_deterministic_per_replication() {
    let dgp = LongitudinalDgp::default().scaled(0.05);
    let a = dgp.generate(Scenario::Complete, 7, 3).unwrap();
    let b = dgp.generate(Scenario::Complete, 7, 3).unwrap();
    let c = dgp.generate(Scenario::Complete, 7, 4).unwrap();
    assert_eq!(a.records, b.records);
    assert_ne!(a.records, c.records);
    let x: u64 = rep_rng(7, 3).random();
    let y: u64 = rep_rng(7, 3).random();
    assert_eq!(x, y);
}

#[test]
fn truth_is_ten_and_simulation_agrees() {
    assert_eq!(true_effect(), 10.0);
    let (t, se) = LongitudinalDgp::default().truth_mc(200_000, 99).unwrap();
    assert!((t - 10.0).abs() < 4.0 * se, "{t} ± {se}");
}

#[test]
fn scenarios_nest_their_fusion_sets() {
    let none = Scenario::None.spec();
    let partial = Scenario::Partial.spec();
    let complete = Scenario::Complete.spec();
    for j in [1, 3, 5, 7] {
        let (a, b, c) = (none.fusion_set(j).unwrap(), partial.fusion_set(j).unwrap(), complete.fusion_set(j).unwrap());
        assert!(a.is_subset(b) && b.is_subset(c), "j={j}");
    }
    for sc in Scenario::ALL {
        assert!(sc.spec().violations().is_empty(), "{}", sc.name());
    }
}

#[test]
fn linear_score_matches_numerical_derivative() {
    let lay = Layout { t: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let beta: Vec<f64> = (0..32).map(|_| rng.random_range(-0.5..0.5)).collect();
    let fit = LinearFit { layout: lay, nu: 3.0, beta: beta.clone(), alpha: 0.4 };
    for _ in 0..5 {
        let z: Vec<f64> = (0..7)
            .map(|m| if m % 2 == 1 { rng.random_range(0..2) as f64 } else { rng.random_range(-2.0..2.0) })
            .collect();
        let s = fit.score(&z);
        let h = 1e-6;
        for i in 0..=beta.len() {
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            let (mut au, mut ad) = (fit.alpha, fit.alpha);
            if i < beta.len() {
                up[i] += h;
                dn[i] -= h;
            } else {
                au += h;
                ad -= h;
            }
            let fd = (fit.log_density(&z, &up, au) - fit.log_density(&z, &dn, ad)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coef {i}: {fd} vs {}", s[i]);
        }
    }
}

fn small_config(reps: usize) -> MonteCarloConfig {
    let mut cfg = MonteCarloConfig::table1();
    cfg.dgp = cfg.dgp.scaled(0.25);
    cfg.scenarios = vec![Scenario::Complete];
    cfg.models = vec![LongitudinalModel::Nonparametric];
    cfg.reps = reps;
    cfg.truth = Some((true_effect(), 0.0));
    cfg
}

#[test]
fn single_replication_has_no_variance() {
    let table = run_monte_carlo(&small_config(1), 1).unwrap();
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];
    assert_eq!(row.var, None);
    assert_eq!(row.ok, 1);
    let csv = table.to_csv().unwrap();
    let line = csv.lines().nth(1).unwrap();
    assert_eq!(line.split(',').nth(3), Some(""));
    assert!(table.to_json().unwrap().contains("\"var\": null"));
}

#[test]
fn config_validation() {
    assert!(MonteCarloConfig::preset("table1").is_ok());
    assert!(MonteCarloConfig::preset("table2").is_err());
    assert!(run_monte_carlo(&small_config(0), 1).is_err());
    let mut cfg = small_config(1);
    cfg.dgp.sizes.pop();
    assert!(run_monte_carlo(&cfg, 1).is_err());
}
