//! Enumeration checks of the gradient calculus on finite fused models.

use crate::discrete::DiscreteModel;
use crate::error::Result;
use crate::estimands::TargetFunctional;
use crate::gradient::{self, GradientComponents, ProjectionMeasure, EPS_GRID};
use crate::simulate::toys::Toy;
use crate::tangent::{self, Reference};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Tolerance for derivative identities.
pub const ORACLE_TOL: f64 = 1e-6;
/// A corrupted gradient must miss by more than this.
pub const NEGATIVE_CONTROL_MIN: f64 = 1e-3;
pub const IDENTIFY_TOL: f64 = 1e-12;
pub const NESTED_TOL: f64 = 1e-10;
pub const PROJECTION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub toy: String,
    pub estimand: String,
    pub check: String,
    pub value: f64,
    pub bound: f64,
    /// True when the value must exceed the bound (negative controls).
    pub lower: bool,
    pub pass: bool,
}

impl CheckResult {
    fn upper(toy: &str, est: &str, check: &str, value: f64, bound: f64) -> Self {
        CheckResult { toy: toy.into(), estimand: est.into(), check: check.into(), value, bound, lower: false, pass: value < bound }
    }

    fn lower(toy: &str, est: &str, check: &str, value: f64, bound: f64) -> Self {
        CheckResult { toy: toy.into(), estimand: est.into(), check: check.into(), value, bound, lower: true, pass: value > bound }
    }
}

/// Gradients of one estimand on one model.
pub struct Gradients {
    pub components: GradientComponents,
    pub lifted: Vec<Vec<f64>>,
    pub canonical: Vec<Vec<f64>>,
}

pub fn gradients(f: &dyn TargetFunctional, model: &DiscreteModel) -> Result<Gradients> {
    let q = model.theta()?;
    let components = gradient::decompose(&f.gradient(&q)?, &q);
    let lifted = gradient::lift(&components, model, &q)?;
    let canonical = gradient::canonical(&components, model, &q, ProjectionMeasure::Pooled)?;
    Ok(Gradients { components, lifted, canonical })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest pathwise mismatch of `grad` over `n` random tangent scores.
pub fn pathwise_sweep<R: Rng>(
    f: &dyn TargetFunctional,
    model: &DiscreteModel,
    grad: &[Vec<f64>],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let q = model.theta()?;
    let phi = |m: &DiscreteModel| f.phi(m);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let dir = gradient::random_tangent_perturbation(model, &q, rng)?;
        worst = worst.max(gradient::oracle_mismatch(model, &phi, grad, &dir, &EPS_GRID)?);
    }
    Ok(worst)
}

/// Relevant coordinate whose projected gradient term has the largest target
/// second moment; zeroing it must break the derivative identity.
fn largest_term(gc: &GradientComponents, model: &DiscreteModel, q: &crate::discrete::TargetLaw) -> Result<usize> {
    let terms = gradient::projected_terms(gc, model, q, ProjectionMeasure::Pooled)?;
    let mut best = (0.0, *model.spec.relevant.iter().next().expect("nonempty J"));
    for &j in &model.spec.relevant {
        let pmf = q.prefix_pmf(j);
        let v: f64 = terms[j - 1].iter().map(|c| c.iter().zip(&pmf).map(|(a, p)| p * a * a).sum::<f64>()).sum();
        if v > best.0 {
            best = (v, j);
        }
    }
    Ok(best.1)
}

/// All checks for one toy.
pub fn check_toy(toy: &Toy, seed: u64, n_scores: usize) -> Result<Vec<CheckResult>> {
    check_toy_with(toy, seed, n_scores, false)
}

/// [`check_toy`], optionally feeding the corrupted gradient to the pathwise
/// check in place of the canonical one so that the check must fail.
pub fn check_toy_with(toy: &Toy, seed: u64, n_scores: usize, inject_fault: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = &toy.model;
    let q = model.theta()?;
    let id = toy.id.as_str();
    let mut out = Vec::new();
    for spec in &toy.estimands {
        let est = spec.name();
        let f = spec.functional()?;
        let g = gradients(f.as_ref(), model)?;

        let phi = f.phi(model)?;
        let ident = f.identified(model)?;
        out.push(CheckResult::upper(id, est, "identifiability", max_abs_diff(&phi, &ident), IDENTIFY_TOL));

        let j = largest_term(&g.components, model, &q)?;
        let corrupt = gradient::canonical(&g.components.without(j), model, &q, ProjectionMeasure::Pooled)?;
        let tested = if inject_fault { &corrupt } else { &g.canonical };
        let mm = pathwise_sweep(f.as_ref(), model, tested, n_scores, &mut rng)?;
        out.push(CheckResult::upper(id, est, "pathwise_canonical", mm, ORACLE_TOL));

        let mut rng_nc = rng.clone();
        let nc = pathwise_sweep(f.as_ref(), model, &corrupt, n_scores, &mut rng_nc)?;
        out.push(CheckResult::lower(id, est, "negative_control", nc, NEGATIVE_CONTROL_MIN));

        if gradient::all_nonparametric(model) {
            let dir = gradient::orthogonal_perturbation(model, &q, &mut rng)?;
            let phi_fn = |m: &DiscreteModel| f.phi(m);
            let deriv = gradient::pathwise_derivative(model, &phi_fn, &dir, &EPS_GRID)?;
            let score = dir.score(model);
            let inner = g.canonical.iter().map(|d| model.inner(d, &score).abs()).fold(0.0, f64::max);
            let dabs = deriv.iter().map(|v| v.abs()).fold(0.0, f64::max);
            out.push(CheckResult::upper(id, est, "orthogonal_score", dabs.max(inner), ORACLE_TOL));
            let d = (0..g.lifted.len()).map(|c| max_abs_diff(&g.lifted[c], &g.canonical[c])).fold(0.0, f64::max);
            out.push(CheckResult::upper(id, est, "canonical_equals_lift", d, 1e-10));
        }

        let mut fixed_pt: f64 = 0.0;
        let mut dual: f64 = 0.0;
        for c in 0..g.canonical.len() {
            let p = gradient::project_fused(&g.canonical[c], model, &q, ProjectionMeasure::Pooled)?;
            fixed_pt = fixed_pt.max(max_abs_diff(&p, &g.canonical[c]));
            let pl = gradient::project_fused(&g.lifted[c], model, &q, ProjectionMeasure::Pooled)?;
            dual = dual.max(max_abs_diff(&pl, &g.canonical[c]));
        }
        out.push(CheckResult::upper(id, est, "canonical_fixed_point", fixed_pt, 1e-8));
        out.push(CheckResult::upper(id, est, "projected_lift_is_canonical", dual, 1e-8));

        let mut gam: f64 = 0.0;
        for &j in &model.spec.relevant {
            let lam = model.lambda(j, &q)?;
            let pj = model.source_prob(j)?;
            let l = model.grid.size(j);
            for c in 0..g.lifted.len() {
                let a = gradient::gamma_j(&g.lifted[c], j, model, &q)?;
                let b = gradient::gamma_j_unsimplified(&g.lifted[c], j, model, &q)?;
                let mass = model.prefix_pool(j, model.spec.fusion_set(j)?);
                for p in (0..a.len()).filter(|&p| mass[p] > 0.0) {
                    let expect = lam[p / l] / pj * g.components.comps[j - 1][c][p];
                    gam = gam.max((a[p] - expect).abs()).max((a[p] - b[p]).abs());
                }
            }
        }
        out.push(CheckResult::upper(id, est, "gamma_of_lift", gam, 1e-10));

        let mean = g.canonical.iter().map(|d| model.expect(d).abs()).fold(0.0, f64::max);
        out.push(CheckResult::upper(id, est, "mean_zero", mean, 1e-12));

        for c in 0..g.canonical.len() {
            let vl = model.variance(&g.lifted[c]);
            let vc = model.variance(&g.canonical[c]);
            if gradient::all_nonparametric(model) {
                out.push(CheckResult::upper(id, est, "variance_not_above_lift", vc - vl, 1e-10));
            } else {
                out.push(CheckResult::lower(id, est, "variance_strictly_below_lift", vl - vc, 1e-8));
            }
        }
    }

    if model.spec.is_nested() && model.spec.relevant.len() == model.spec.d && model.spec.d > 0 {
        for spec in &toy.estimands {
            let f = spec.functional()?;
            let g = gradients(f.as_ref(), model)?;
            let dev = gradient::nested_fusion_identity_check(&g.components, model, &q)?;
            out.push(CheckResult::upper(id, spec.name(), "nested_aipw_identity", dev, NESTED_TOL));
        }
    }

    out.extend(projection_checks(toy, &mut rng)?);
    Ok(out)
}

/// Idempotence and orthogonality of every non-identity class projection, and
/// agreement of the fused projection with least squares on a spanning set.
pub fn projection_checks<R: Rng>(toy: &Toy, rng: &mut R) -> Result<Vec<CheckResult>> {
    let model = &toy.model;
    let q = model.theta()?;
    let id = toy.id.as_str();
    let mut out = Vec::new();
    for &j in &model.spec.relevant {
        let class = model.spec.class(j);
        if class.is_nonparametric() {
            continue;
        }
        let r = Reference::new(&model.grid, j, q.prefix_pmf(j));
        let raw: Vec<f64> = (0..r.pmf.len()).map(|_| rng.sample(StandardNormal)).collect();
        let f = r.center(&raw);
        let p1 = tangent::project(&f, &class, &r)?;
        let p2 = tangent::project(&p1, &class, &r)?;
        out.push(CheckResult::upper(id, class.name(), "projection_idempotent", max_abs_diff(&p1, &p2), 1e-8));
        let resid: Vec<f64> = f.iter().zip(&p1).map(|(a, b)| a - b).collect();
        let basis = tangent::basis(&class, &r)?;
        let orth = basis.iter().map(|t| r.inner(&resid, t).abs()).fold(0.0, f64::max);
        out.push(CheckResult::upper(id, class.name(), "projection_orthogonal", orth, PROJECTION_TOL));
        let ls = tangent::least_squares_projection(&f, &basis, &r);
        let on_support: f64 = (0..f.len()).filter(|&p| r.pmf[p] > 0.0).map(|p| (ls[p] - p1[p]).abs()).fold(0.0, f64::max);
        out.push(CheckResult::upper(id, class.name(), "projection_least_squares", on_support, PROJECTION_TOL));
    }
    let raw: Vec<f64> = (0..model.nz() * model.k()).map(|_| rng.sample(StandardNormal)).collect();
    let pf = gradient::project_fused(&raw, model, &q, ProjectionMeasure::Pooled)?;
    let basis = gradient::fused_tangent_basis(model, &q, ProjectionMeasure::Pooled)?;
    let ls = gradient::least_squares_fused(&raw, &basis, model);
    let dev = (0..raw.len()).filter(|&i| model.pmf[i] > 0.0).map(|i| (pf[i] - ls[i]).abs()).fold(0.0, f64::max);
    out.push(CheckResult::upper(id, "fused", "fused_projection_least_squares", dev, PROJECTION_TOL));
    Ok(out)
}

/// Runs every check for each toy, in parallel across toys.
pub fn check_catalog(toys: &[Toy], seed: u64, n_scores: usize) -> Result<Vec<CheckResult>> {
    check_catalog_with(toys, seed, n_scores, false)
}

pub fn check_catalog_with(toys: &[Toy], seed: u64, n_scores: usize, inject_fault: bool) -> Result<Vec<CheckResult>> {
    use rayon::prelude::*;
    let per: Vec<Result<Vec<CheckResult>>> =
        toys.par_iter().enumerate().map(|(i, t)| check_toy_with(t, seed.wrapping_add(i as u64), n_scores, inject_fault)).collect();
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}
