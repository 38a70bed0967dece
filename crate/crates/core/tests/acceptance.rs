//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! values. Exits 0 after reporting; set `ACCEPTANCE_STRICT=1` to exit 1 when
//! any criterion fails.

mod common;

use fusionest::data::{FusedDataset, FusionSpec, ObservationRecord};
use fusionest::estimands::{EstimandSpec, LongitudinalModel, ZFamily};
use fusionest::nuisance::{Basis, Learner};
use fusionest::onestep::{longitudinal, one_step, OneStepOptions};
use fusionest::simulate::dgp::{true_effect, LongitudinalDgp, Scenario, T};
use fusionest::simulate::monte_carlo::{run_monte_carlo, MetricTable, MonteCarloConfig};
use fusionest::simulate::toys::catalog;
use fusionest::stats::weighted_mean;
use fusionest::verify::{self, CheckResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

struct Outcome {
    id: &'static str,
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(id: &'static str, pass: bool, summary: String) -> Self {
        Outcome { id, pass, summary, details: Vec::new() }
    }
}

fn status(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cell_var(t: &MetricTable, model: &str, sc: Scenario) -> f64 {
    t.row(model, sc).and_then(|r| r.var).unwrap_or(f64::NAN)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let table = match run_monte_carlo(&MonteCarloConfig::table1(), 0) {
        Ok(t) => t,
        Err(e) => return Outcome::new("1", false, format!("table1 run failed: {e}")),
    };
    let np_none = cell_var(&table, "nonparametric", Scenario::None);
    let a = cell_var(&table, "nonparametric", Scenario::Complete) / np_none;
    let b = cell_var(&table, "linear", Scenario::Complete) / np_none;
    let cov_lo = table.rows.iter().map(|r| r.coverage).fold(f64::INFINITY, f64::min);
    let cov_hi = table.rows.iter().map(|r| r.coverage).fold(f64::NEG_INFINITY, f64::max);
    let bias = table.rows.iter().map(|r| r.bias.abs()).fold(0.0, f64::max);
    let pa = a <= 0.95;
    let pb = b <= 0.60;
    let pc = cov_lo >= 90.0 && cov_hi <= 99.5;
    let pd = bias <= 0.15;
    let mut o = Outcome::new(
        "1",
        pa && pb && pc && pd && table.valid,
        format!("table1, {} reps, truth {:.4} (se {:.4}), {:.0?}", table.reps, table.truth, table.truth_se, start.elapsed()),
    );
    o.details.push(format!("(a) {} var ratio NP complete/none = {a:.3} (<= 0.95)", status(pa)));
    o.details.push(format!("(b) {} var ratio linear complete / NP none = {b:.3} (<= 0.60)", status(pb)));
    o.details.push(format!("(c) {} coverage range [{cov_lo:.1}, {cov_hi:.1}] (within [90, 99.5])", status(pc)));
    o.details.push(format!("(d) {} max |bias| = {bias:.4} (<= 0.15)", status(pd)));
    if !table.valid {
        o.details.push(format!("too many failed replications: {:?}", table.failures));
    }
    for r in &table.rows {
        o.details.push(format!(
            "    {:<13} {:<8} bias {:>8.4} var {:>7.4} cov {:>5.1}",
            r.model,
            r.scenario.name(),
            r.bias,
            r.var.unwrap_or(f64::NAN),
            r.coverage
        ));
    }
    o
}

fn rows<'a>(results: &'a [CheckResult], checks: &[&str]) -> Vec<&'a CheckResult> {
    results.iter().filter(|r| checks.contains(&r.check.as_str())).collect()
}

fn worst_upper(rs: &[&CheckResult]) -> f64 {
    rs.iter().map(|r| r.value).fold(0.0, f64::max)
}

fn criteria_2_to_5() -> Vec<Outcome> {
    let start = Instant::now();
    let results = match catalog(1).and_then(|toys| verify::check_catalog(&toys, 1, 20)) {
        Ok(r) => r,
        Err(e) => {
            return ["2", "3", "4", "5"].into_iter().map(|id| Outcome::new(id, false, format!("catalog checks failed: {e}"))).collect()
        }
    };
    let elapsed = start.elapsed();
    let mut out = Vec::new();

    let path = rows(&results, &["pathwise_canonical"]);
    let neg = rows(&results, &["negative_control"]);
    let nc_min = neg.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let p2 = path.iter().all(|r| r.pass) && neg.iter().all(|r| r.pass) && elapsed.as_secs() <= 60;
    out.push(Outcome::new(
        "2",
        p2,
        format!(
            "pathwise oracle over {} estimands x 20 scores: max mismatch {:.2e} (< 1e-6), min negative control {:.2e} (> 1e-3), {:.1?} (<= 60 s)",
            path.len(),
            worst_upper(&path),
            nc_min,
            elapsed
        ),
    ));

    let ident = rows(&results, &["identifiability"]);
    out.push(Outcome::new(
        "3",
        !ident.is_empty() && ident.iter().all(|r| r.pass),
        format!("identification formula vs target functional on {} estimands: max {:.2e} (< 1e-12)", ident.len(), worst_upper(&ident)),
    ));

    let nested = rows(&results, &["nested_aipw_identity"]);
    let on_nested: Vec<_> = nested.iter().filter(|r| r.toy == "nested").collect();
    out.push(Outcome::new(
        "4",
        !on_nested.is_empty() && nested.iter().all(|r| r.pass),
        format!("nested fusion AIPW identity on {} toy estimands: max {:.2e} (< 1e-10)", nested.len(), worst_upper(&nested)),
    ));

    let proj = rows(&results, &["projection_idempotent", "projection_orthogonal"]);
    let var_le = rows(&results, &["variance_not_above_lift"]);
    let var_lt = rows(&results, &["variance_strictly_below_lift"]);
    let gap = var_lt.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let p5 = !proj.is_empty() && !var_lt.is_empty() && proj.iter().chain(&var_le).chain(&var_lt).all(|r| r.pass);
    let mut o = Outcome::new(
        "5",
        p5,
        format!(
            "{} class projections: max idempotence/orthogonality error {:.2e} (< 1e-6); variance not above lift on {} nonparametric cases, strictly below on {} restricted cases (min gap {:.2e})",
            proj.len() / 2,
            worst_upper(&proj),
            var_le.len(),
            var_lt.len(),
            gap
        ),
    );
    let others: Vec<_> = results
        .iter()
        .filter(|r| !r.pass)
        .filter(|r| !["pathwise_canonical", "negative_control", "identifiability", "nested_aipw_identity"].contains(&r.check.as_str()))
        .collect();
    for r in &others {
        o.details.push(format!("failing check {} {} {}: {:.3e} (bound {:.1e})", r.toy, r.estimand, r.check, r.value, r.bound));
    }
    o.pass &= others.is_empty();
    out.push(o);
    out
}

fn criterion_6() -> Outcome {
    let devs = common::classical_deviations();
    let worst = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    let (literal, corrected) = common::ope_on_policy_deviations(false);
    let (flat_literal, _) = common::ope_on_policy_deviations(true);
    let p_classical = worst < 1e-8;
    let p_literal = literal < 1e-12;
    let mut o = Outcome::new(
        "6",
        p_classical && p_literal,
        format!("classical influence functions max deviation {worst:.2e} (< 1e-8); on-policy OPE vs z3 - phi {literal:.3e}"),
    );
    for (name, d) in &devs {
        o.details.push(format!("{name:<16} {d:.2e}"));
    }
    o.details.push(format!("{} classical reductions (ITT, OPE, QTE, Z-estimation)", status(p_classical)));
    o.details.push(format!("{} on-policy OPE gradient equals z3 - phi: max deviation {literal:.3e}", status(p_literal)));
    o.details.push(format!(
        "     with the action-centring term v(z1) - mu(z1, z2) added: {corrected:.2e}; with a reward law that ignores the action: {flat_literal:.2e}"
    ));
    o
}

fn criterion_7() -> Outcome {
    let eps = [0.2, 0.1, 0.05];
    let mut o = Outcome::new("7", true, String::new());
    let mut slopes = Vec::new();
    for id in ["itt", "ope"] {
        let r = common::remainders(id, 21, &eps);
        let s = common::loglog_slope(&eps, &r);
        o.details.push(format!("{id}: remainders {:?}, slope {s:.3}", r.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()));
        o.pass &= (s - 2.0).abs() <= 0.2;
        slopes.push(s);
    }
    o.summary = format!("remainder log-log slope over eps {eps:?}: {:.3}, {:.3} (2 +/- 0.2)", slopes[0], slopes[1]);
    o
}

fn mean_dataset(n: usize, seed: u64) -> FusedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|_| {
            let y: f64 = rng.sample(StandardNormal);
            let mut r = ObservationRecord::from_reals(&[1.0 + 3.0 * y], 1);
            r.w = rng.random_range(0.5..2.0);
            r
        })
        .collect();
    FusedDataset::new(recs, FusionSpec::single_source(1))
}

fn mean_halfwidths(sc: Scenario, factors: &[f64], reps: u64) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut opts = OneStepOptions::default();
    opts.nuisance.outcome_learner = Learner::Linear { basis: Basis::Pairwise };
    let mut ns = Vec::new();
    let mut hw = Vec::new();
    for &f in factors {
        let dgp = LongitudinalDgp::default().scaled(f);
        let mut tot = 0.0;
        for rep in 0..reps {
            let ds = dgp.generate(sc, 8, rep).map_err(|e| e.to_string())?;
            let r = longitudinal(&ds, T, &[LongitudinalModel::Nonparametric], &opts).map_err(|e| e.to_string())?;
            tot += 0.5 * (r[0].ci[0].hi - r[0].ci[0].lo);
        }
        ns.push(dgp.n() as f64);
        hw.push(tot / reps as f64);
    }
    Ok((ns, hw))
}

fn criterion_8() -> Outcome {
    let ds = mean_dataset(2000, 8);
    let y: Vec<f64> = ds.records.iter().map(|r| r.get(1).unwrap_or(f64::NAN)).collect();
    let w: Vec<f64> = ds.records.iter().map(|r| r.w).collect();
    let target = weighted_mean(&y, &w);
    let est = EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 1 } };
    let mean_dev = match one_step(&ds, &est, &OneStepOptions::default()) {
        Ok(r) => (r.estimate[0] - target).abs() / target.abs(),
        Err(e) => return Outcome::new("8", false, format!("mean estimand failed: {e}")),
    };
    // Rounding level for cross-fitted weighted sums over 2000 rows.
    let pa = mean_dev <= 1e-13;

    let factors = [1.0, 2.0, 4.0, 8.0];
    let (slope, ns, hw) = match mean_halfwidths(Scenario::None, &factors, 8) {
        Ok((ns, hw)) => (common::loglog_slope(&ns, &hw), ns, hw),
        Err(e) => return Outcome::new("8", false, format!("half-width sweep failed: {e}")),
    };
    let pb = (slope + 0.5).abs() <= 0.05;
    let mut o = Outcome::new(
        "8",
        pa && pb,
        format!("weighted mean relative error {mean_dev:.1e}; CI half-width slope vs n {slope:.3} (-0.5 +/- 0.05)"),
    );
    o.details.push(format!("(a) {} mean estimand equals the weighted sample mean: relative error {mean_dev:.1e} (<= 1e-13)", status(pa)));
    o.details.push(format!("(b) {} scenario none, nonparametric, 8 reps per n", status(pb)));
    for (n, h) in ns.iter().zip(&hw) {
        o.details.push(format!("    n {n:>7} mean half-width {h:.4}"));
    }
    match mean_halfwidths(Scenario::Partial, &factors[..3], 4) {
        Ok((ns, hw)) => o.details.push(format!(
            "    info: scenario partial, n {:?}: half-widths {:?}, slope {:.3}",
            ns,
            hw.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            common::loglog_slope(&ns, &hw)
        )),
        Err(e) => o.details.push(format!("    info: partial sweep failed: {e}")),
    }
    o
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool").install(f)
}

fn criterion_9() -> Outcome {
    let mut cfg = MonteCarloConfig::table1();
    cfg.dgp = cfg.dgp.scaled(0.1);
    cfg.reps = 4;
    cfg.truth = Some((true_effect(), 0.0));
    let tables: Vec<String> = [1, 2, 4]
        .iter()
        .map(|&t| run_monte_carlo(&cfg, t).and_then(|m| m.to_json()).unwrap_or_else(|e| format!("error: {e}")))
        .collect();
    let p_tables = !tables[0].starts_with("error") && tables.iter().all(|t| t == &tables[0]);

    let ds = LongitudinalDgp::default().scaled(0.2).generate(Scenario::Complete, 9, 0).expect("dataset");
    let models = cfg.models.clone();
    let opts = cfg.options.clone();
    let reports: Vec<String> = [1, 2, 4]
        .iter()
        .map(|&t| {
            in_pool(t, || longitudinal(&ds, T, &models, &opts))
                .map(|rs| rs.iter().map(|r| r.to_json(true).unwrap_or_default()).collect::<Vec<_>>().join("\n"))
                .unwrap_or_else(|e| format!("error: {e}"))
        })
        .collect();
    let p_reports = !reports[0].starts_with("error") && reports.iter().all(|r| r == &reports[0]);

    let checks: Vec<String> = [1, 2, 4]
        .iter()
        .map(|&t| {
            in_pool(t, || catalog(2).and_then(|toys| verify::check_catalog(&toys, 2, 3)))
                .map(|rs| serde_json::to_string(&rs).unwrap_or_default())
                .unwrap_or_else(|e| format!("error: {e}"))
        })
        .collect();
    let p_checks = !checks[0].starts_with("error") && checks.iter().all(|c| c == &checks[0]);

    let mut o = Outcome::new("9", p_tables && p_reports && p_checks, "threads 1, 2, 4 produce byte-identical output".into());
    o.details.push(format!("{} MetricTable JSON ({} bytes)", status(p_tables), tables[0].len()));
    o.details.push(format!("{} estimate reports with gradient values ({} bytes)", status(p_reports), reports[0].len()));
    o.details.push(format!("{} toy check results ({} bytes)", status(p_checks), checks[0].len()));
    o
}

fn main() {
    let start = Instant::now();
    let mut all: Vec<Outcome> = Vec::new();
    all.push(criterion_1());
    all.extend(criteria_2_to_5());
    all.push(criterion_6());
    all.push(criterion_7());
    all.push(criterion_8());
    all.push(criterion_9());
    println!();
    for o in &all {
        println!("criterion {}: {} {}", o.id, status(o.pass), o.summary);
        for d in &o.details {
            println!("    {d}");
        }
    }
    let failed: Vec<&str> = all.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {} of {} criteria pass ({:.0?})", all.len() - failed.len(), all.len(), start.elapsed());
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
