//! Shared fixtures: random single-source discrete laws and classical
//! influence functions computed by direct enumeration of the joint pmf.

#![allow(dead_code)]

use fusionest::data::FusionSpec;
use fusionest::discrete::{DiscreteModel, Factors, Grid};
use fusionest::estimands::{EstimandSpec, EvalPolicy, ZFamily};
use fusionest::verify;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Single-source law on `grid` with conditionals drawn away from zero.
/// `override_cond` replaces the conditional table of one coordinate.
pub fn random_model(grid: Grid, seed: u64, override_cond: Option<(usize, Vec<f64>)>) -> DiscreteModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.d();
    let mut conds = Vec::with_capacity(d);
    for j in 1..=d {
        let l = grid.size(j);
        let mut c = Vec::with_capacity(grid.prefix_len(j));
        for _ in 0..grid.prefix_len(j - 1) {
            let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
            let tot: f64 = raw.iter().sum();
            c.extend(raw.iter().map(|v| v / tot));
        }
        conds.push(c);
    }
    if let Some((j, c)) = override_cond {
        conds[j - 1] = c;
    }
    let f = Factors { p_s: vec![1.0], conds };
    DiscreteModel::from_factors(grid, FusionSpec::single_source(d), &f, BTreeMap::new())
}

/// Joint points with their probabilities.
pub fn points(model: &DiscreteModel) -> Vec<(Vec<f64>, f64)> {
    (0..model.nz()).map(|zi| (model.grid.point(zi), model.pmf[zi])).collect()
}

fn cond_mean(pts: &[(Vec<f64>, f64)], keep: impl Fn(&[f64]) -> bool, f: impl Fn(&[f64]) -> f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (z, p) in pts {
        if keep(z) {
            num += p * f(z);
            den += p;
        }
    }
    num / den
}

fn prob(pts: &[(Vec<f64>, f64)], keep: impl Fn(&[f64]) -> bool) -> f64 {
    pts.iter().filter(|(z, _)| keep(z)).map(|(_, p)| p).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Canonical gradient of `est` at a single-source model, one vector per component.
pub fn canonical(est: &EstimandSpec, model: &DiscreteModel) -> Vec<Vec<f64>> {
    let f = est.functional().unwrap();
    verify::gradients(f.as_ref(), model).unwrap().canonical
}

pub fn itt_grid() -> Grid {
    Grid::scalar(vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.5, 2.0]])
}

/// AIPW influence function of `E[Y(1)] − E[Y(0)]` with covariate `z1`,
/// assignment `z2` and outcome `z4`; the uptake `z3` is averaged out.
pub fn aipw_itt(model: &DiscreteModel) -> (f64, Vec<f64>) {
    let pts = points(model);
    let pi = |x: f64, a: f64| prob(&pts, |z| z[0] == x && z[1] == a) / prob(&pts, |z| z[0] == x);
    let mu = |x: f64, a: f64| cond_mean(&pts, |z| z[0] == x && z[1] == a, |z| z[3]);
    let psi: f64 = pts.iter().map(|(z, p)| p * (mu(z[0], 1.0) - mu(z[0], 0.0))).sum();
    let d = pts
        .iter()
        .map(|(z, _)| {
            let (x, a, y) = (z[0], z[1], z[3]);
            let sign = if a == 1.0 { 1.0 } else { -1.0 };
            mu(x, 1.0) - mu(x, 0.0) + sign * (y - mu(x, a)) / pi(x, a) - psi
        })
        .collect();
    (psi, d)
}

pub fn ope_grid() -> Grid {
    Grid::scalar(vec![vec![-1.0, 0.0, 1.0], vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]])
}

pub fn ope_policy() -> EvalPolicy {
    EvalPolicy { actions: vec![0.0, 1.0, 2.0], intercepts: vec![0.0, 0.4, -0.3], slopes: vec![vec![0.0], vec![0.8], vec![-0.5]] }
}

/// Logging conditional of `z2` given `z1` equal to `policy`.
pub fn logging_table(grid: &Grid, policy: &EvalPolicy) -> Vec<f64> {
    grid.levels[0].iter().flat_map(|x| grid.levels[1].iter().map(move |a| policy.prob(x, a[0]))).collect()
}

/// Doubly robust influence function of the value of `policy` with context
/// `z1`, action `z2` and reward `z3`.
pub fn dr_ope(model: &DiscreteModel, policy: &EvalPolicy) -> (f64, Vec<f64>) {
    let pts = points(model);
    let pi0 = |x: f64, a: f64| prob(&pts, |z| z[0] == x && z[1] == a) / prob(&pts, |z| z[0] == x);
    let mu = |x: f64, a: f64| cond_mean(&pts, |z| z[0] == x && z[1] == a, |z| z[2]);
    let v = |x: f64| policy.actions.iter().map(|&a| policy.prob(&[x], a) * mu(x, a)).sum::<f64>();
    let psi: f64 = pts.iter().map(|(z, p)| p * v(z[0])).sum();
    let d = pts
        .iter()
        .map(|(z, _)| {
            let (x, a, r) = (z[0], z[1], z[2]);
            v(x) + policy.prob(&[x], a) / pi0(x, a) * (r - mu(x, a)) - psi
        })
        .collect();
    (psi, d)
}

pub const QTE_WIDTH: f64 = 1.0;

pub fn qte_grid() -> Grid {
    Grid::scalar(vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0, 2.0, 3.0, 4.0]])
}

/// Share of the bin centred at `v` lying below `u`.
fn smoothed_step(v: f64, u: f64) -> f64 {
    let lo = v - 0.5 * QTE_WIDTH;
    if u <= lo {
        0.0
    } else if u >= lo + QTE_WIDTH {
        1.0
    } else {
        (u - lo) / QTE_WIDTH
    }
}

/// Influence function of the difference of `τ`-quantiles of the binned
/// outcome `z3` under `z2 = 1` and `z2 = 0`, adjusting for `z1`.
pub fn qte_if(model: &DiscreteModel, tau: f64) -> (f64, Vec<f64>) {
    let pts = points(model);
    let xs: Vec<f64> = model.grid.levels[0].iter().map(|v| v[0]).collect();
    let px = |x: f64| prob(&pts, |z| z[0] == x);
    let pi = |x: f64, a: f64| prob(&pts, |z| z[0] == x && z[1] == a) / px(x);
    let cond_cdf = |x: f64, a: f64, u: f64| cond_mean(&pts, |z| z[0] == x && z[1] == a, |z| smoothed_step(z[2], u));
    let cdf = |a: f64, u: f64| xs.iter().map(|&x| px(x) * cond_cdf(x, a, u)).sum::<f64>();
    let density = |a: f64, u: f64| {
        xs.iter().map(|&x| px(x) * cond_mean(&pts, |z| z[0] == x && z[1] == a, |z| ((u - z[2]).abs() < 0.5 * QTE_WIDTH) as u8 as f64)).sum::<f64>()
            / QTE_WIDTH
    };
    let quantile = |a: f64| {
        let (mut lo, mut hi) = (-1.0, 6.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(a, mid) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let (q1, q0) = (quantile(1.0), quantile(0.0));
    let (f1, f0) = (density(1.0, q1), density(0.0, q0));
    let arm = |z: &[f64], a: f64, q: f64, f: f64| {
        let ipw = if z[1] == a { (smoothed_step(z[2], q) - cond_cdf(z[0], a, q)) / pi(z[0], a) } else { 0.0 };
        -(ipw + cond_cdf(z[0], a, q) - tau) / f
    };
    let d = pts.iter().map(|(z, _)| arm(z, 1.0, q1, f1) - arm(z, 0.0, q0, f0)).collect();
    (q1 - q0, d)
}

pub fn ls_grid() -> Grid {
    Grid::scalar(vec![vec![-1.0, 0.0, 2.0], vec![0.0, 1.0], vec![-2.0, 0.0, 1.0, 4.0]])
}

/// Influence function `E[xxᵀ]⁻¹ x (y − xᵀβ)` of least squares of `z3` on
/// `(1, z1, z2)`, one vector per coefficient.
pub fn ls_if(model: &DiscreteModel) -> (Vec<f64>, Vec<Vec<f64>>) {
    let pts = points(model);
    let x = |z: &[f64]| DVector::from_vec(vec![1.0, z[0], z[1]]);
    let mut a = DMatrix::<f64>::zeros(3, 3);
    let mut b = DVector::<f64>::zeros(3);
    for (z, p) in &pts {
        let xi = x(z);
        a += *p * &xi * xi.transpose();
        b += *p * z[2] * &xi;
    }
    let inv = a.try_inverse().unwrap();
    let beta = &inv * b;
    let mut out = vec![vec![0.0; pts.len()]; 3];
    for (i, (z, _)) in pts.iter().enumerate() {
        let xi = x(z);
        let r = z[2] - xi.dot(&beta);
        let v = &inv * xi * r;
        for c in 0..3 {
            out[c][i] = v[c];
        }
    }
    (beta.iter().copied().collect(), out)
}

/// Largest deviation between canonical and classical gradients, per estimand.
pub fn classical_deviations() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let m = random_model(itt_grid(), 1, None);
    let (_, d) = aipw_itt(&m);
    out.push(("itt", max_abs_diff(&canonical(&EstimandSpec::IttAte, &m)[0], &d)));

    let pol = ope_policy();
    let m = random_model(ope_grid(), 2, None);
    let (_, d) = dr_ope(&m, &pol);
    out.push(("ope", max_abs_diff(&canonical(&EstimandSpec::OffPolicy { policy: pol }, &m)[0], &d)));

    for (i, tau) in [0.3, 0.5, 0.7].into_iter().enumerate() {
        let m = random_model(qte_grid(), 3 + i as u64, None);
        let (_, d) = qte_if(&m, tau);
        let g = canonical(&EstimandSpec::QuantileTe { tau, width: QTE_WIDTH }, &m);
        out.push(("qte", max_abs_diff(&g[0], &d)));
    }

    let m = random_model(ls_grid(), 6, None);
    let (_, d) = ls_if(&m);
    let g = canonical(&EstimandSpec::ZEstimation { family: ZFamily::LeastSquares { outcome: 3, covariates: vec![1, 2] } }, &m);
    out.push(("z_least_squares", (0..3).map(|c| max_abs_diff(&g[c], &d[c])).fold(0.0, f64::max)));
    out
}

/// Off-policy gradient on a law whose logging policy is the evaluation
/// policy: deviations from `z3 − φ` and from `z3 − φ + v(z1) − μ(z1, z2)`.
/// With `flat_reward` the reward law does not depend on the action.
pub fn ope_on_policy_deviations(flat_reward: bool) -> (f64, f64) {
    let grid = ope_grid();
    let pol = ope_policy();
    let mut m = random_model(grid.clone(), 7, Some((2, logging_table(&grid, &pol))));
    if flat_reward {
        let mut f = m.factors();
        let (l2, l3) = (grid.size(2), grid.size(3));
        for x in 0..grid.size(1) {
            for a in 1..l2 {
                for r in 0..l3 {
                    f.conds[2][(x * l2 + a) * l3 + r] = f.conds[2][x * l2 * l3 + r];
                }
            }
        }
        m = DiscreteModel::from_factors(grid.clone(), m.spec.clone(), &f, BTreeMap::new());
    }
    let est = EstimandSpec::OffPolicy { policy: pol };
    let phi = est.functional().unwrap().phi(&m).unwrap()[0];
    let g = canonical(&est, &m);
    let pts = points(&m);
    let mu = |x: f64, a: f64| cond_mean(&pts, |z| z[0] == x && z[1] == a, |z| z[2]);
    let v = |x: f64| cond_mean(&pts, |z| z[0] == x, |z| z[2]);
    let literal: Vec<f64> = pts.iter().map(|(z, _)| z[2] - phi).collect();
    let full: Vec<f64> = pts.iter().map(|(z, _)| z[2] - phi + v(z[0]) - mu(z[0], z[1])).collect();
    (max_abs_diff(&g[0], &literal), max_abs_diff(&g[0], &full))
}

/// Exact remainder `φ(P̂) − φ(P⁰) + E₀[D*(P̂)]` along a random in-model
/// perturbation `P̂ = P⁰` moved by `ε`, for each `ε` in `eps`.
pub fn remainders(toy_id: &str, seed: u64, eps: &[f64]) -> Vec<f64> {
    use fusionest::gradient::random_tangent_perturbation;
    use fusionest::simulate::toys::make_discrete_toy;
    let toy = make_discrete_toy(toy_id, seed).unwrap();
    let m0 = &toy.model;
    let f = toy.estimands[0].functional().unwrap();
    let phi0 = f.phi(m0).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_tangent_perturbation(m0, &m0.theta().unwrap(), &mut rng).unwrap();
    let base = m0.factors();
    eps.iter()
        .map(|&e| {
            let m1 = dir.apply(m0, e, &base).expect("valid perturbed law");
            let d1 = &verify::gradients(f.as_ref(), &m1).unwrap().canonical[0];
            f.phi(&m1).unwrap()[0] - phi0 + m0.expect(d1)
        })
        .collect()
}

/// Least-squares slope of `log|y|` on `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
