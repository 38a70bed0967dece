//! Target functionals `ψ(Q)`, their nonparametric Q-gradients on finite
//! laws, identification `φ(P)` by nested pooled means, and the serializable
//! estimand configuration.

use crate::discrete::{DiscreteModel, Grid, PrefixFn, TargetLaw};
use crate::error::{FusionError, Result};
use crate::numdiff::{jacobian, jacobian_step};
use crate::stats::{logistic, solve_psd};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Denominators of ratio estimands below this are treated as unidentified.
pub const WEAK_ID_FLOOR: f64 = 1e-3;
/// Densities at a quantile below this are treated as flat.
pub const FLAT_QUANTILE_FLOOR: f64 = 1e-6;

/// Softmax evaluation policy over the levels of an action coordinate, with
/// logits linear in the first components of the history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPolicy {
    /// Action values, one per logit.
    pub actions: Vec<f64>,
    pub intercepts: Vec<f64>,
    /// `slopes[a][m]` multiplies history coordinate `m+1`.
    #[serde(default)]
    pub slopes: Vec<Vec<f64>>,
}

impl EvalPolicy {
    pub fn probs(&self, history: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.actions.len())
            .map(|a| {
                let s = self.slopes.get(a).map(|b| b.iter().zip(history).map(|(x, y)| x * y).sum::<f64>()).unwrap_or(0.0);
                self.intercepts[a] + s
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.iter().map(|v| v / tot).collect()
    }

    /// Probability of taking action `value`; zero for unknown actions.
    pub fn prob(&self, history: &[f64], value: f64) -> f64 {
        match self.actions.iter().position(|&a| a == value) {
            Some(i) => self.probs(history)[i],
            None => 0.0,
        }
    }
}

/// Intervention on one coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Sets the coordinate to a value.
    Static { value: f64 },
    /// Draws the coordinate from a softmax in the history.
    Softmax { policy: EvalPolicy },
}

impl Policy {
    /// `g*(v | history)`.
    pub fn prob(&self, history: &[f64], value: f64) -> f64 {
        match self {
            Policy::Static { value: v } => {
                if *v == value {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Softmax { policy } => policy.prob(history, value),
        }
    }

    /// Conditional table over the prefix at `j`.
    pub fn table(&self, grid: &Grid, j: usize) -> PrefixFn {
        (0..grid.prefix_len(j))
            .map(|p| {
                let h = grid.parent(p, j);
                let hist: Vec<f64> = (1..j).map(|m| grid.value(h, j - 1, m)).collect();
                self.prob(&hist, grid.value(p, j, j))
            })
            .collect()
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Policy::Static { .. })
    }
}

/// One arm of a contrast: a coefficient and interventions by coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub coef: f64,
    pub policies: BTreeMap<usize, Policy>,
}

/// Functional of the target law with a closed-form nonparametric gradient.
pub trait TargetFunctional: Send + Sync {
    fn dim(&self) -> usize;
    fn psi(&self, q: &TargetLaw) -> Result<Vec<f64>>;
    /// Nonparametric Q-gradient, one function of `z` per component.
    fn gradient(&self, q: &TargetLaw) -> Result<Vec<Vec<f64>>>;
    /// `φ(P)` by the identification formula, computed directly from the joint
    /// law of `(Z, S)` without forming `θ(P)`.
    fn identified(&self, model: &DiscreteModel) -> Result<Vec<f64>>;
    /// `φ(P) = ψ(θ(P))`.
    fn phi(&self, model: &DiscreteModel) -> Result<Vec<f64>> {
        self.psi(&model.theta()?)
    }
}

/// `E[f(Z)]` under the law whose conditionals are replaced by `policies` and
/// otherwise identified by pooled means over fusion sets (all sources or the
/// known conditional for irrelevant coordinates).
pub fn nested_pool_mean(model: &DiscreteModel, f: &[f64], policies: &BTreeMap<usize, PrefixFn>) -> Result<f64> {
    let g = &model.grid;
    let mut cur = f.to_vec();
    for j in (1..=g.d()).rev() {
        let l = g.size(j);
        let next: Vec<f64> = if let Some(pol) = policies.get(&j).or_else(|| model.fixed.get(&j).filter(|_| !model.spec.is_relevant(j))) {
            (0..g.prefix_len(j - 1)).map(|h| (0..l).map(|z| pol[h * l + z] * cur[h * l + z]).sum()).collect()
        } else {
            let set = if model.spec.is_relevant(j) { model.spec.fusion_set(j)?.clone() } else { model.all_sources() };
            let full = model.broadcast(&g.extend(&cur, j));
            model.cond_exp_pool(&full, j - 1, &set)
        };
        cur = next;
    }
    Ok(cur[0])
}

/// Mean of an outcome coordinate under interventions, contrasted over arms.
#[derive(Clone, Debug)]
pub struct InterventionalMean {
    pub outcome: usize,
    pub arms: Vec<Arm>,
}

impl InterventionalMean {
    pub fn mean(outcome: usize) -> Self {
        InterventionalMean { outcome, arms: vec![Arm { coef: 1.0, policies: BTreeMap::new() }] }
    }

    /// Contrast `E[Y(1)] − E[Y(0)]` setting the listed coordinates.
    pub fn static_contrast(outcome: usize, treated: &[usize]) -> Self {
        let arm = |v: f64, c: f64| Arm { coef: c, policies: treated.iter().map(|&j| (j, Policy::Static { value: v })).collect() };
        InterventionalMean { outcome, arms: vec![arm(1.0, 1.0), arm(0.0, -1.0)] }
    }

    fn outcome_fn(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len()).map(|zi| grid.point(zi)[self.outcome - 1]).collect()
    }

    fn check(&self, model_relevant: &dyn Fn(usize) -> bool) -> Result<()> {
        for j in 1..=self.outcome {
            let intervened = self.arms.iter().all(|a| a.policies.contains_key(&j));
            if !intervened && !model_relevant(j) {
                return Err(FusionError::Config(format!("coordinate {j} enters the functional but is irrelevant")));
            }
        }
        Ok(())
    }

    /// `V_j` tables (j = 0..=d) for one arm.
    fn values(&self, arm: &Arm, q: &TargetLaw) -> Vec<Vec<f64>> {
        let g = &q.grid;
        let d = g.d();
        let mut out = vec![Vec::new(); d + 1];
        out[d] = self.outcome_fn(g);
        for j in (1..=d).rev() {
            let l = g.size(j);
            let c: PrefixFn = match arm.policies.get(&j) {
                Some(p) => p.table(g, j),
                None => q.cond(j).to_vec(),
            };
            out[j - 1] = (0..g.prefix_len(j - 1)).map(|h| (0..l).map(|z| c[h * l + z] * out[j][h * l + z]).sum()).collect();
        }
        out
    }
}

impl TargetFunctional for InterventionalMean {
    fn dim(&self) -> usize {
        1
    }

    fn psi(&self, q: &TargetLaw) -> Result<Vec<f64>> {
        Ok(vec![self.arms.iter().map(|a| a.coef * self.values(a, q)[0][0]).sum()])
    }

    fn gradient(&self, q: &TargetLaw) -> Result<Vec<Vec<f64>>> {
        let g = &q.grid;
        let mut out = vec![0.0; g.len()];
        for arm in &self.arms {
            let v = self.values(arm, q);
            let tables: BTreeMap<usize, PrefixFn> = arm.policies.iter().map(|(&j, p)| (j, p.table(g, j))).collect();
            for (zi, o) in out.iter_mut().enumerate() {
                let mut w = 1.0;
                for j in 1..=self.outcome {
                    let p = g.prefix_of(zi, j);
                    match tables.get(&j) {
                        Some(t) => {
                            let qj = q.cond(j)[p];
                            w = if qj > 0.0 { w * t[p] / qj } else { 0.0 };
                        }
                        None => *o += arm.coef * w * (v[j][p] - v[j - 1][g.parent(p, j)]),
                    }
                }
            }
        }
        Ok(vec![out])
    }

    fn identified(&self, model: &DiscreteModel) -> Result<Vec<f64>> {
        self.check(&|j| model.spec.is_relevant(j))?;
        let g = &model.grid;
        let y = self.outcome_fn(g);
        let mut tot = 0.0;
        for arm in &self.arms {
            let tables = arm.policies.iter().map(|(&j, p)| (j, p.table(g, j))).collect();
            tot += arm.coef * nested_pool_mean(model, &y, &tables)?;
        }
        Ok(vec![tot])
    }
}

/// `num / den` for scalar functionals.
pub struct Ratio {
    pub num: Box<dyn TargetFunctional>,
    pub den: Box<dyn TargetFunctional>,
}

impl Ratio {
    fn parts(&self, q: &TargetLaw) -> Result<(f64, f64)> {
        let n = self.num.psi(q)?[0];
        let d = self.den.psi(q)?[0];
        if d.abs() < WEAK_ID_FLOOR {
            return Err(FusionError::Numerical(format!("weak identification: denominator {d:.3e}")));
        }
        Ok((n, d))
    }
}

impl TargetFunctional for Ratio {
    fn dim(&self) -> usize {
        1
    }

    fn psi(&self, q: &TargetLaw) -> Result<Vec<f64>> {
        let (n, d) = self.parts(q)?;
        Ok(vec![n / d])
    }

    fn gradient(&self, q: &TargetLaw) -> Result<Vec<Vec<f64>>> {
        let (n, d) = self.parts(q)?;
        let gn = &self.num.gradient(q)?[0];
        let gd = &self.den.gradient(q)?[0];
        Ok(vec![gn.iter().zip(gd).map(|(a, b)| a / d - n / (d * d) * b).collect()])
    }

    fn identified(&self, model: &DiscreteModel) -> Result<Vec<f64>> {
        let n = self.num.identified(model)?[0];
        let d = self.den.identified(model)?[0];
        if d.abs() < WEAK_ID_FLOOR {
            return Err(FusionError::Numerical(format!("weak identification: denominator {d:.3e}")));
        }
        Ok(vec![n / d])
    }
}

/// Estimating function `m(z, γ)`; `z` holds first components per coordinate.
pub type MomentFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Parameter `γ` solving `E_Q[m(Z, γ)] = 0`.
#[derive(Clone)]
pub struct ZFunctional {
    pub b: usize,
    pub m: MomentFn,
    pub gamma0: Vec<f64>,
}

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX: usize = 100;

/// Newton's method with a central-difference Jacobian.
pub fn newton_root(f: &dyn Fn(&[f64]) -> Vec<f64>, x0: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut x = x0.to_vec();
    let mut last_norm = f64::INFINITY;
    for _ in 0..NEWTON_MAX {
        let r = f(&x);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let jac = jacobian(f, &x, jacobian_step);
        let b = x.len();
        let a = DMatrix::from_fn(b, b, |i, k| jac[i][k]);
        let lu = a.lu();
        let step = lu
            .solve(&DVector::from_vec(r.clone()))
            .ok_or_else(|| FusionError::Numerical("singular Jacobian in root finding".into()))?;
        let mut t = 1.0;
        let mut next: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        // Backtrack when the full step increases the residual.
        for _ in 0..30 {
            let rn = f(&next);
            let nn = rn.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nn <= norm || norm < 1e-300 {
                break;
            }
            t *= 0.5;
            next = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
        }
        let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if moved <= NEWTON_TOL * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            let jac = jacobian(f, &x, jacobian_step);
            return Ok((x, jac));
        }
        last_norm = norm;
    }
    Err(FusionError::Numerical(format!("root finding did not converge; residual norm {last_norm:.3e}")))
}

impl ZFunctional {
    fn expected(&self, pmf: &[f64], grid: &Grid, gamma: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.b];
        for (zi, &p) in pmf.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let v = (self.m)(&grid.point(zi), gamma);
            for c in 0..self.b {
                acc[c] += p * v[c];
            }
        }
        acc
    }

    fn solve(&self, q: &TargetLaw) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let pmf = q.joint();
        let f = |g: &[f64]| self.expected(&pmf, &q.grid, g);
        let (gamma, jac) = newton_root(&f, &self.gamma0)?;
        Ok((gamma, DMatrix::from_fn(self.b, self.b, |i, k| jac[i][k])))
    }
}

impl TargetFunctional for ZFunctional {
    fn dim(&self) -> usize {
        self.b
    }

    fn psi(&self, q: &TargetLaw) -> Result<Vec<f64>> {
        Ok(self.solve(q)?.0)
    }

    fn gradient(&self, q: &TargetLaw) -> Result<Vec<Vec<f64>>> {
        let (gamma, v) = self.solve(q)?;
        let vinv = v.try_inverse().ok_or_else(|| FusionError::Numerical("singular V in Z-estimation".into()))?;
        let g = &q.grid;
        let mut out = vec![vec![0.0; g.len()]; self.b];
        for zi in 0..g.len() {
            let m = DVector::from_vec((self.m)(&g.point(zi), &gamma));
            let d = -(&vinv * m);
            for c in 0..self.b {
                out[c][zi] = d[c];
            }
        }
        Ok(out)
    }

    fn identified(&self, model: &DiscreteModel) -> Result<Vec<f64>> {
        let g = &model.grid;
        let none = BTreeMap::new();
        let f = |gamma: &[f64]| -> Vec<f64> {
            (0..self.b)
                .map(|c| {
                    let t: Vec<f64> = (0..g.len()).map(|zi| (self.m)(&g.point(zi), gamma)[c]).collect();
                    nested_pool_mean(model, &t, &none).unwrap_or(f64::NAN)
                })
                .collect()
        };
        Ok(newton_root(&f, &self.gamma0)?.0)
    }
}

/// Logistic working-model projection coefficients `(β₀, β₁)` for a binary
/// outcome on one covariate.
pub fn kl_logistic(covariate: usize, outcome: usize) -> ZFunctional {
    ZFunctional {
        b: 2,
        m: Arc::new(move |z: &[f64], g: &[f64]| {
            let x = z[covariate - 1];
            let r = logistic(g[0] + g[1] * x) - z[outcome - 1];
            vec![r, r * x]
        }),
        gamma0: vec![0.0, 0.0],
    }
}

/// Mean of a coordinate as a Z-estimator.
pub fn z_mean(outcome: usize) -> ZFunctional {
    ZFunctional { b: 1, m: Arc::new(move |z: &[f64], g: &[f64]| vec![z[outcome - 1] - g[0]]), gamma0: vec![0.0] }
}

/// Bin membership CDF: mass at `v` spread uniformly over `[v − w/2, v + w/2]`.
pub fn bin_cdf(v: f64, u: f64, width: f64) -> f64 {
    ((u - (v - 0.5 * width)) / width).clamp(0.0, 1.0)
}

/// Leftmost `u` with `F(u) ≥ τ` for a nondecreasing piecewise-linear `F` with
/// the given knots, and the slope there.
pub fn invert_piecewise(knots: &[f64], cdf: &dyn Fn(f64) -> f64, tau: f64) -> Result<(f64, f64)> {
    let mut k: Vec<f64> = knots.to_vec();
    k.sort_by(|a, b| a.total_cmp(b));
    k.dedup();
    for w in k.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (cdf(a), cdf(b));
        if fb >= tau && fb > fa {
            if fa >= tau {
                return Err(FusionError::Numerical("flat quantile: CDF jumps at a knot".into()));
            }
            let slope = (fb - fa) / (b - a);
            if slope < FLAT_QUANTILE_FLOOR {
                return Err(FusionError::Numerical(format!("flat quantile: density {slope:.3e}")));
            }
            return Ok((a + (tau - fa) / slope, slope));
        }
    }
    Err(FusionError::Numerical("quantile level outside the CDF range".into()))
}

/// Quantile treatment effect `q_τ(Z₃ | do(Z₂=1)) − q_τ(Z₃ | do(Z₂=0))` with a
/// covariate `Z₁`, binary treatment `Z₂` and binned outcome `Z₃` (levels
/// spaced by `width`, mass spread uniformly within each bin).
#[derive(Clone, Debug)]
pub struct QuantileContrast {
    pub tau: f64,
    pub width: f64,
}

impl QuantileContrast {
    fn knots(&self, grid: &Grid) -> Vec<f64> {
        grid.levels[2].iter().flat_map(|v| [v[0] - 0.5 * self.width, v[0] + 0.5 * self.width]).collect()
    }

    /// `F(u | z1, a)` for each `z1` level, and `F_a(u)`.
    fn cdfs(&self, q: &TargetLaw, a: f64, u: f64) -> (Vec<f64>, f64) {
        let g = &q.grid;
        let (l1, l2, l3) = (g.size(1), g.size(2), g.size(3));
        let ai = g.levels[1].iter().position(|v| v[0] == a).expect("treatment level");
        let q1 = q.cond(1);
        let q3 = q.cond(3);
        let mut cond = vec![0.0; l1];
        let mut tot = 0.0;
        for z1 in 0..l1 {
            let p2 = z1 * l2 + ai;
            cond[z1] = (0..l3).map(|z3| q3[p2 * l3 + z3] * bin_cdf(g.levels[2][z3][0], u, self.width)).sum();
            tot += q1[z1] * cond[z1];
        }
        (cond, tot)
    }

    fn arm(&self, q: &TargetLaw, a: f64) -> Result<(f64, f64)> {
        invert_piecewise(&self.knots(&q.grid), &|u| self.cdfs(q, a, u).1, self.tau)
    }

    /// Z-estimation route: `m_γ(z) = (1(z₂=a)/Q₂(a|z₁)(H(z₃;γ_a) − τ))_{a=1,0}`
    /// with the treatment conditional `q2` known.
    pub fn z_route(&self, grid: &Grid, q2: &[f64]) -> ZFunctional {
        let g1: Vec<f64> = grid.levels[0].iter().map(|v| v[0]).collect();
        let g2: Vec<f64> = grid.levels[1].iter().map(|v| v[0]).collect();
        let q2 = q2.to_vec();
        let (tau, width) = (self.tau, self.width);
        let mid = {
            let vals: Vec<f64> = grid.levels[2].iter().map(|v| v[0]).collect();
            0.5 * (vals[0] + vals[vals.len() - 1])
        };
        ZFunctional {
            b: 2,
            m: Arc::new(move |z: &[f64], gamma: &[f64]| {
                let i1 = g1.iter().position(|&v| v == z[0]).expect("covariate level");
                let i2 = g2.iter().position(|&v| v == z[1]).expect("treatment level");
                let pr = q2[i1 * g2.len() + i2];
                [1.0, 0.0]
                    .iter()
                    .enumerate()
                    .map(|(c, &a)| if z[1] == a { (bin_cdf(z[2], gamma[c], width) - tau) / pr } else { 0.0 })
                    .collect()
            }),
            gamma0: vec![mid, mid],
        }
    }
}

impl TargetFunctional for QuantileContrast {
    fn dim(&self) -> usize {
        1
    }

    fn psi(&self, q: &TargetLaw) -> Result<Vec<f64>> {
        Ok(vec![self.arm(q, 1.0)?.0 - self.arm(q, 0.0)?.0])
    }

    fn gradient(&self, q: &TargetLaw) -> Result<Vec<Vec<f64>>> {
        let g = &q.grid;
        let l2 = g.size(2);
        let mut out = vec![0.0; g.len()];
        for (a, sign) in [(1.0, 1.0), (0.0, -1.0)] {
            let (u, dens) = self.arm(q, a)?;
            let (cond, _) = self.cdfs(q, a, u);
            for (zi, o) in out.iter_mut().enumerate() {
                let lv = g.decode(zi, 3);
                let z2 = g.levels[1][lv[1]][0];
                let z3 = g.levels[2][lv[2]][0];
                let ipw = if z2 == a {
                    let pr = q.cond(2)[lv[0] * l2 + lv[1]];
                    (bin_cdf(z3, u, self.width) - cond[lv[0]]) / pr
                } else {
                    0.0
                };
                *o += -sign * (ipw + cond[lv[0]] - self.tau) / dens;
            }
        }
        Ok(vec![out])
    }

    fn identified(&self, model: &DiscreteModel) -> Result<Vec<f64>> {
        let g = &model.grid;
        let mut out = 0.0;
        for (a, sign) in [(1.0, 1.0), (0.0, -1.0)] {
            let pol: BTreeMap<usize, PrefixFn> = [(2, Policy::Static { value: a }.table(g, 2))].into_iter().collect();
            let cdf = |u: f64| {
                let f: Vec<f64> = (0..g.len()).map(|zi| bin_cdf(g.point(zi)[2], u, self.width)).collect();
                nested_pool_mean(model, &f, &pol).unwrap_or(f64::NAN)
            };
            out += sign * invert_piecewise(&self.knots(g), &cdf, self.tau)?.0;
        }
        Ok(vec![out])
    }
}

/// Outcome model for the longitudinal effect.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LongitudinalModel {
    #[default]
    Nonparametric,
    /// Outcome symmetric about its conditional mean.
    Symmetric,
    /// Linear mean with a scaled Student-t error, `ε = α|u_T| t_ν`.
    Linear {
        #[serde(default)]
        kappa: Kappa,
        #[serde(default = "default_nu")]
        nu: f64,
    },
}

fn default_nu() -> f64 {
    3.0
}

/// Named feature maps `κ(h̄, a)` for the linear outcome model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa {
    /// Intercept, treatment interactions and their products with each
    /// covariate (32 terms for three periods).
    #[default]
    SaturatedTreatment,
}

/// Family of estimating functions for Z-estimation on data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZFamily {
    Mean { outcome: usize },
    LeastSquares { outcome: usize, covariates: Vec<usize> },
    Logistic { outcome: usize, covariate: usize },
}

fn default_width() -> f64 {
    1.0
}

/// Estimand selection as read from configuration. Coordinate roles follow
/// fixed conventions per estimand (documented on each variant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimand", rename_all = "snake_case")]
pub enum EstimandSpec {
    /// Always-treated minus never-treated mean outcome with `t` periods:
    /// `U_t` at slot `2t−1`, `A_t` at slot `2t`, outcome at slot `2t−1` of the
    /// last period.
    LongitudinalEffect {
        t: usize,
        #[serde(default)]
        model: LongitudinalModel,
    },
    /// Slots: covariates 1, assignment 2, uptake 3, outcome 4.
    IttAte,
    /// Complier effect, ITT on the outcome over ITT on uptake (slots as ITT).
    Cate,
    /// Slots: context 1, action 2, reward 3.
    OffPolicy { policy: EvalPolicy },
    ZEstimation { family: ZFamily },
    /// Slots: covariate 1, binary treatment 2, outcome 3.
    QuantileTe {
        tau: f64,
        #[serde(default = "default_width")]
        width: f64,
    },
    KlLogistic { covariate: usize, outcome: usize },
}

impl EstimandSpec {
    pub fn dim(&self) -> usize {
        match self {
            EstimandSpec::ZEstimation { family: ZFamily::LeastSquares { covariates, .. } } => covariates.len() + 1,
            EstimandSpec::ZEstimation { family: ZFamily::Logistic { .. } } | EstimandSpec::KlLogistic { .. } => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimandSpec::LongitudinalEffect { .. } => "longitudinal_effect",
            EstimandSpec::IttAte => "itt_ate",
            EstimandSpec::Cate => "cate",
            EstimandSpec::OffPolicy { .. } => "off_policy",
            EstimandSpec::ZEstimation { .. } => "z_estimation",
            EstimandSpec::QuantileTe { .. } => "quantile_te",
            EstimandSpec::KlLogistic { .. } => "kl_logistic",
        }
    }

    /// Coordinates required by the estimand.
    pub fn min_d(&self) -> usize {
        match self {
            EstimandSpec::LongitudinalEffect { t, .. } => 2 * t - 1,
            EstimandSpec::IttAte | EstimandSpec::Cate => 4,
            EstimandSpec::OffPolicy { .. } | EstimandSpec::QuantileTe { .. } => 3,
            EstimandSpec::ZEstimation { family } => match family {
                ZFamily::Mean { outcome } => *outcome,
                ZFamily::LeastSquares { outcome, covariates } => covariates.iter().copied().chain([*outcome]).max().unwrap_or(1),
                ZFamily::Logistic { outcome, covariate } => (*outcome).max(*covariate),
            },
            EstimandSpec::KlLogistic { covariate, outcome } => (*outcome).max(*covariate),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.min_d() > d || self.min_d() == 0 {
            return Err(FusionError::Config(format!("{} needs at least {} coordinates, have {d}", self.name(), self.min_d())));
        }
        match self {
            EstimandSpec::LongitudinalEffect { t, .. } if *t == 0 => Err(FusionError::Config("t must be positive".into())),
            EstimandSpec::QuantileTe { tau, width } if !(*tau > 0.0 && *tau < 1.0) || *width <= 0.0 => {
                Err(FusionError::Config("tau must lie in (0, 1) and width must be positive".into()))
            }
            EstimandSpec::OffPolicy { policy } if policy.actions.len() != policy.intercepts.len() || policy.actions.is_empty() => {
                Err(FusionError::Config("policy needs one intercept per action".into()))
            }
            _ => Ok(()),
        }
    }

    /// Functional on finite target laws, following the slot conventions.
    pub fn functional(&self) -> Result<Box<dyn TargetFunctional>> {
        Ok(match self {
            EstimandSpec::LongitudinalEffect { t, .. } => {
                let treated: Vec<usize> = (1..*t).map(|m| 2 * m).collect();
                Box::new(InterventionalMean::static_contrast(2 * t - 1, &treated))
            }
            EstimandSpec::IttAte => Box::new(InterventionalMean::static_contrast(4, &[2])),
            EstimandSpec::Cate => Box::new(Ratio {
                num: Box::new(InterventionalMean::static_contrast(4, &[2])),
                den: Box::new(InterventionalMean::static_contrast(3, &[2])),
            }),
            EstimandSpec::OffPolicy { policy } => Box::new(InterventionalMean {
                outcome: 3,
                arms: vec![Arm { coef: 1.0, policies: [(2, Policy::Softmax { policy: policy.clone() })].into_iter().collect() }],
            }),
            EstimandSpec::ZEstimation { family } => match family {
                ZFamily::Mean { outcome } => Box::new(z_mean(*outcome)),
                ZFamily::LeastSquares { outcome, covariates } => Box::new(least_squares(*outcome, covariates.clone())),
                ZFamily::Logistic { outcome, covariate } => Box::new(kl_logistic(*covariate, *outcome)),
            },
            EstimandSpec::QuantileTe { tau, width } => Box::new(QuantileContrast { tau: *tau, width: *width }),
            EstimandSpec::KlLogistic { covariate, outcome } => Box::new(kl_logistic(*covariate, *outcome)),
        })
    }
}

/// Least-squares coefficients (intercept first) as a Z-estimator.
pub fn least_squares(outcome: usize, covariates: Vec<usize>) -> ZFunctional {
    let b = covariates.len() + 1;
    ZFunctional {
        b,
        m: Arc::new(move |z: &[f64], g: &[f64]| {
            let x: Vec<f64> = std::iter::once(1.0).chain(covariates.iter().map(|&c| z[c - 1])).collect();
            let r = z[outcome - 1] - x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            x.iter().map(|v| v * r).collect()
        }),
        gamma0: vec![0.0; b],
    }
}

/// Closed-form weighted least squares, used where the Z-estimator is linear.
pub fn wls(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let p = x.first().map_or(0, |r| r.len());
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for ((row, &yi), &wi) in x.iter().zip(y).zip(w) {
        for i in 0..p {
            b[i] += wi * row[i] * yi;
            for k in 0..p {
                a[(i, k)] += wi * row[i] * row[k];
            }
        }
    }
    Ok(solve_psd(&a, &b)?.0.iter().copied().collect())
}
