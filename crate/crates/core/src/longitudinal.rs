//! Always-treated versus never-treated contrast with `t` periods, and the last
//! gradient term under the symmetric-location and linear scaled-t outcome
//! models.

use crate::data::{Dense, FusionSpec};
use crate::error::{FusionError, Result};
use crate::estimands::LongitudinalModel;
use crate::kde::Kde;
use crate::nuisance::{fit_regression, relevant_part, Fitted, Learner};
use crate::plan::{SeqPlan, TopFn};
use crate::stats::solve_psd;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Slot layout: `U_s` at `2s−1`, `A_s` at `2s`, outcome at `2t−1`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub t: usize,
}

impl Layout {
    pub fn y(&self) -> usize {
        2 * self.t - 1
    }

    pub fn treatments(&self) -> Vec<usize> {
        (1..self.t).map(|s| 2 * s).collect()
    }

    pub fn covariates(&self) -> Vec<usize> {
        (1..self.t).map(|s| 2 * s - 1).collect()
    }

    pub fn plan(&self) -> SeqPlan {
        SeqPlan::static_contrast(self.y(), &self.treatments())
    }

    /// Arm index (0 treated, 1 control) whose treatments all equal the row's,
    /// if any.
    pub fn arm_of(&self, z: &[f64]) -> Option<usize> {
        let tr = self.treatments();
        if tr.iter().all(|&m| z[m - 1] == 1.0) {
            Some(0)
        } else if tr.iter().all(|&m| z[m - 1] == 0.0) {
            Some(1)
        } else {
            None
        }
    }
}

/// Saturated treatment map: every product of a subset of treatments, times
/// each of `1, U_1, …, U_{t−1}`. Treatments are taken from `z` unless `arm`
/// overrides them. `2^{t−1} · t` terms (32 for `t = 4`).
pub fn kappa(lay: &Layout, z: &[f64], arm: Option<f64>) -> Vec<f64> {
    let tr: Vec<f64> = lay.treatments().iter().map(|&m| arm.unwrap_or(z[m - 1])).collect();
    let cov: Vec<f64> = std::iter::once(1.0).chain(lay.covariates().iter().map(|&m| z[m - 1])).collect();
    let mut out = Vec::with_capacity(cov.len() << tr.len());
    for c in &cov {
        for mask in 0..(1usize << tr.len()) {
            let mut p = *c;
            for (b, a) in tr.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    p *= a;
                }
            }
            out.push(p);
        }
    }
    out
}

/// Rows of the last pool usable for the outcome model.
fn last_pool(dense: &Dense, rows: &[usize], spec: &FusionSpec, y: usize) -> Result<Vec<usize>> {
    let sy = spec.fusion_set(y)?;
    Ok(rows.iter().copied().filter(|&i| sy.contains(&dense.s[i]) && dense.observed_through(i, y)).collect())
}

fn gather(dense: &Dense, rows: &[usize], f: impl Fn(&[f64]) -> f64) -> (Vec<f64>, Vec<f64>) {
    (rows.iter().map(|&i| f(&dense.z[i])).collect(), rows.iter().map(|&i| dense.w[i]).collect())
}

/// Fitted last-coordinate model for one fold.
pub enum LastModel {
    Nonparametric,
    Symmetric(SymmetricFit),
    Linear(LinearFit),
}

impl LastModel {
    /// Replacement regressions `V_{y−1}` per arm, if any.
    pub fn tops(&self) -> Option<Vec<TopFn>> {
        match self {
            LastModel::Nonparametric => None,
            LastModel::Symmetric(s) => Some(s.arms.iter().map(|a| a.center.clone()).collect()),
            LastModel::Linear(l) => {
                let lay = l.layout;
                Some(
                    [1.0, 0.0]
                        .iter()
                        .map(|&a| {
                            let beta = l.beta.clone();
                            Arc::new(move |z: &[f64]| dot(&kappa(&lay, z, Some(a)), &beta)) as TopFn
                        })
                        .collect(),
                )
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the last-coordinate model on the training rows.
pub fn fit_last(
    model: &LongitudinalModel,
    lay: Layout,
    dense: &Dense,
    train: &[usize],
    spec: &FusionSpec,
    outcome_learner: &Learner,
    score_learner: &Learner,
) -> Result<LastModel> {
    match model {
        LongitudinalModel::Nonparametric => Ok(LastModel::Nonparametric),
        LongitudinalModel::Symmetric => {
            if lay.t < 2 {
                return Err(FusionError::Config("the symmetric model needs t ≥ 2".into()));
            }
            Ok(LastModel::Symmetric(SymmetricFit::fit(lay, dense, train, spec, outcome_learner, score_learner)?))
        }
        LongitudinalModel::Linear { nu, .. } => {
            if lay.t < 2 {
                return Err(FusionError::Config("the linear model needs t ≥ 2".into()));
            }
            if !(*nu > 2.0) {
                return Err(FusionError::Config("the linear model needs ν > 2 for the moment estimator of α".into()));
            }
            Ok(LastModel::Linear(LinearFit::fit(lay, *nu, dense, train, spec)?))
        }
    }
}

/// Symmetric-location fit for one arm.
pub struct SymmetricArm {
    pub center: TopFn,
    joint: Kde<f64>,
    marg: Kde<f64>,
    m: Fitted,
    info: Fitted,
    info_floor: f64,
    /// Scores are zeroed where the marginal density of `h` or the symmetrized
    /// conditional density of `e` falls below these.
    marg_floor: f64,
    cond_floor: f64,
}

pub struct SymmetricFit {
    pub layout: Layout,
    pub arms: Vec<SymmetricArm>,
}

/// Fraction of the mean squared score below which the conditional
/// information is floored.
pub const INFO_FLOOR: f64 = 0.05;

/// Fraction of the median training density below which the score is zeroed.
pub const SCORE_TRIM: f64 = 0.01;

/// Symmetrized location score `(f′(e) − f′(−e)) / (f(e) + f(−e))` of the
/// conditional residual density, with the marginal density of `h` and the
/// symmetrized conditional density of `e`; optionally leaves out one point.
fn symmetric_score(joint: &Kde<f64>, marg: &Kde<f64>, e: f64, h: &[f64], skip: usize) -> (f64, f64, f64) {
    let fm = marg.density_excluding(h, skip);
    if !(fm > 0.0) {
        return (0.0, 0.0, 0.0);
    }
    let mut x: Vec<f64> = std::iter::once(e).chain(h.iter().copied()).collect();
    let (fp, dp) = joint.density_and_partial_excluding(&x, 0, skip);
    x[0] = -e;
    let (fn_, dn) = joint.density_and_partial_excluding(&x, 0, skip);
    let p = fp + fn_;
    if !(p > 0.0) {
        return (0.0, fm, 0.0);
    }
    ((dp - dn) / p, fm, 0.5 * p / fm)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

impl SymmetricArm {
    fn trimmed(&self, (l, fm, q): (f64, f64, f64)) -> f64 {
        if fm < self.marg_floor || q < self.cond_floor {
            0.0
        } else {
            l
        }
    }
}

impl SymmetricFit {
    fn fit(lay: Layout, dense: &Dense, train: &[usize], spec: &FusionSpec, outcome_learner: &Learner, score_learner: &Learner) -> Result<Self> {
        let y = lay.y();
        let pool = last_pool(dense, train, spec, y)?;
        let mut arms = Vec::new();
        for a in 0..2 {
            let rows: Vec<usize> = pool.iter().copied().filter(|&i| lay.arm_of(&dense.z[i]) == Some(a)).collect();
            if rows.len() < 4 {
                return Err(FusionError::Precondition(format!("too few arm-{a} rows for the symmetric outcome model")));
            }
            let feats: Vec<Vec<f64>> = rows.iter().map(|&i| relevant_part(&dense.z[i], y - 1, spec)).collect();
            let (yv, w) = gather(dense, &rows, |z| z[y - 1]);
            // Center: average of two regressions fitted on alternating halves.
            let mut halves = Vec::new();
            for h in 0..2 {
                let idx: Vec<usize> = (0..rows.len()).filter(|k| k % 2 == h).collect();
                let x: Vec<Vec<f64>> = idx.iter().map(|&k| feats[k].clone()).collect();
                let yy: Vec<f64> = idx.iter().map(|&k| yv[k]).collect();
                let ww: Vec<f64> = idx.iter().map(|&k| w[k]).collect();
                halves.push(fit_regression(outcome_learner, &x, &yy, &ww)?.model);
            }
            let sp = spec.clone();
            let center: TopFn = Arc::new(move |z: &[f64]| {
                let f = relevant_part(z, y - 1, &sp);
                0.5 * (halves[0].predict(&f) + halves[1].predict(&f))
            });
            let mut zz = vec![0.0; y];
            let resid: Vec<f64> = rows
                .iter()
                .zip(&yv)
                .map(|(&i, yi)| {
                    zz.copy_from_slice(&dense.z[i][..y]);
                    yi - center(&zz[..y - 1])
                })
                .collect();
            let jpts: Vec<Vec<f64>> = resid.iter().zip(&feats).map(|(e, f)| std::iter::once(*e).chain(f.iter().copied()).collect()).collect();
            let joint = Kde::fit(&jpts, Some(&w));
            let marg = Kde::new(&feats, Some(&w), joint.bandwidths()[1..].to_vec());
            let raw: Vec<(f64, f64, f64)> = (0..rows.len()).map(|k| symmetric_score(&joint, &marg, resid[k], &feats[k], k)).collect();
            let marg_floor = SCORE_TRIM * median(raw.iter().map(|r| r.1).collect());
            let cond_floor = SCORE_TRIM * median(raw.iter().map(|r| r.2).collect());
            let mut arm = SymmetricArm { center, joint, marg, m: Fitted::Constant(0.0), info: Fitted::Constant(0.0), info_floor: 0.0, marg_floor, cond_floor };
            let scores: Vec<f64> = raw.into_iter().map(|r| arm.trimmed(r)).collect();
            let em: Vec<f64> = resid.iter().zip(&scores).map(|(e, l)| e * l).collect();
            let l2: Vec<f64> = scores.iter().map(|l| l * l).collect();
            arm.m = fit_regression(score_learner, &feats, &em, &w)?.model;
            arm.info = fit_regression(score_learner, &feats, &l2, &w)?.model;
            let tw: f64 = w.iter().sum();
            arm.info_floor = INFO_FLOOR * l2.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / tw;
            arms.push(arm);
        }
        Ok(SymmetricFit { layout: lay, arms })
    }

    /// `(e, ℓ̃, m̂, Ĩ)` for arm `a` at a full row `z`, with the trimmed score.
    pub fn parts(&self, a: usize, z: &[f64], spec: &FusionSpec) -> [f64; 4] {
        let y = self.layout.y();
        let arm = &self.arms[a];
        let h = relevant_part(z, y - 1, spec);
        let e = z[y - 1] - (arm.center)(&z[..y - 1]);
        let l = arm.trimmed(symmetric_score(&arm.joint, &arm.marg, e, &h, usize::MAX));
        [e, l, arm.m.predict(&h), arm.info.predict(&h).max(arm.info_floor)]
    }

    /// `m̂(h) ℓ̃ / Ĩ(h)` for arm `a` at a full row `z`.
    pub fn projected(&self, a: usize, z: &[f64], spec: &FusionSpec) -> f64 {
        let [_, l, m, info] = self.parts(a, z, spec);
        if !(info > 0.0) {
            return 0.0;
        }
        m * l / info
    }
}

/// Linear mean with error `α|U_{t−1}| t_ν`: least-squares `β̂` over the pooled
/// last-coordinate rows and a moment estimator of `α`.
pub struct LinearFit {
    pub layout: Layout,
    pub nu: f64,
    pub beta: Vec<f64>,
    pub alpha: f64,
}

impl LinearFit {
    fn fit(lay: Layout, nu: f64, dense: &Dense, train: &[usize], spec: &FusionSpec) -> Result<Self> {
        let y = lay.y();
        let pool = last_pool(dense, train, spec, y)?;
        let x: Vec<Vec<f64>> = pool.iter().map(|&i| kappa(&lay, &dense.z[i], None)).collect();
        let (yv, w) = gather(dense, &pool, |z| z[y - 1]);
        let p = x.first().map_or(0, |r| r.len());
        if pool.len() <= p {
            return Err(FusionError::Precondition("too few rows for the linear outcome model".into()));
        }
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        for ((r, &yi), &wi) in x.iter().zip(&yv).zip(&w) {
            for i in 0..p {
                b[i] += wi * r[i] * yi;
                for k in 0..=i {
                    a[(i, k)] += wi * r[i] * r[k];
                }
            }
        }
        for i in 0..p {
            for k in i + 1..p {
                a[(i, k)] = a[(k, i)];
            }
        }
        let beta: Vec<f64> = solve_psd(&a, &b)?.0.iter().copied().collect();
        let scale = lay.covariates()[lay.t - 2];
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &i) in pool.iter().enumerate() {
            let u = dense.z[i][scale - 1];
            if u.abs() > 1e-12 {
                let e = yv[k] - dot(&x[k], &beta);
                num += w[k] * e * e / (u * u);
                den += w[k];
            }
        }
        let alpha = (num / den / (nu / (nu - 2.0))).sqrt();
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(FusionError::Numerical("degenerate scale estimate in the linear outcome model".into()));
        }
        Ok(LinearFit { layout: lay, nu, beta, alpha })
    }

    fn scale_of(&self, z: &[f64]) -> f64 {
        z[self.layout.covariates()[self.layout.t - 2] - 1].abs()
    }

    /// Log-density of the error model at row `z` with parameters `(β, α)`.
    pub fn log_density(&self, z: &[f64], beta: &[f64], alpha: f64) -> f64 {
        let u = self.scale_of(z);
        let s = alpha * u;
        let x = (z[self.layout.y() - 1] - dot(&kappa(&self.layout, z, None), beta)) / s;
        let nu = self.nu;
        -s.ln() - 0.5 * (nu + 1.0) * (1.0 + x * x / nu).ln()
    }

    /// Analytic score `(ℓ_β, ℓ_α)` at row `z`; zero when the scale vanishes.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let k = kappa(&self.layout, z, None);
        let u = self.scale_of(z);
        if u < 1e-12 {
            return vec![0.0; k.len() + 1];
        }
        let s = self.alpha * u;
        let x = (z[self.layout.y() - 1] - dot(&k, &self.beta)) / s;
        let nu = self.nu;
        let g = (nu + 1.0) * x / (nu + x * x);
        let mut out: Vec<f64> = k.iter().map(|v| v * g / s).collect();
        out.push(-1.0 / self.alpha + g * x / self.alpha);
        out
    }
}

/// `(E ℓℓᵀ)⁻¹ E[ℓ r]` over the given rows with weights.
pub fn score_projection(scores: &[Vec<f64>], r: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let p = scores.first().map_or(0, |s| s.len());
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for ((l, &ri), &wi) in scores.iter().zip(r).zip(w) {
        for i in 0..p {
            b[i] += wi * l[i] * ri;
            for k in 0..=i {
                a[(i, k)] += wi * l[i] * l[k];
            }
        }
    }
    for i in 0..p {
        for k in i + 1..p {
            a[(i, k)] = a[(k, i)];
        }
    }
    Ok(solve_psd(&a, &b)?.0.iter().copied().collect())
}
