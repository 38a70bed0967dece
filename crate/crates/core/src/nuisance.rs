//! Nuisance estimation: regressions, conditional laws, propensities, density
//! ratios and source probabilities.

use crate::data::{ColumnKind, Dense, FusedDataset, FusionSpec, ObservationRecord};
use crate::estimands::Policy;
use crate::error::{FusionError, Result};
use crate::kde::{normal_scale_product, BandwidthRule, Kde};
use crate::stats::{logistic, solve_psd};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Default ratio clip constant `c`: ratios are clipped to `[1/c, c]`.
pub const DEFAULT_CLIP: f64 = 50.0;
/// Default propensity trim: evaluations lie in `[ε, 1 − ε]`.
pub const DEFAULT_TRIM: f64 = 0.01;
/// Columns with at most this many distinct integer values are discrete.
pub const MAX_DISCRETE_LEVELS: usize = 12;
/// Minimum simulated sample for the target marginal in `fit_density_ratio`.
pub const MIN_TARGET_DRAWS: usize = 5000;

/// Feature expansion for parametric learners.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Intercept and main effects.
    #[default]
    Linear,
    /// Intercept, main effects and all pairwise products.
    Pairwise,
}

impl Basis {
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + x.len() + x.len() * x.len() / 2);
        out.push(1.0);
        out.extend_from_slice(x);
        if *self == Basis::Pairwise {
            for a in 0..x.len() {
                for b in a + 1..x.len() {
                    out.push(x[a] * x[b]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    Linear {
        #[serde(default)]
        basis: Basis,
    },
    Logistic {
        #[serde(default)]
        basis: Basis,
    },
    /// Nadaraya-Watson regression with a Gaussian product kernel.
    Kernel {
        #[serde(default)]
        bandwidth: BandwidthRule,
    },
    /// Density learner; only valid where a conditional law is fitted.
    KernelDensity {
        #[serde(default)]
        bandwidth: BandwidthRule,
    },
    /// Convex combination of members with weights minimizing cross-validated
    /// squared error.
    Ensemble {
        members: Vec<Learner>,
        #[serde(default = "default_cv_folds")]
        folds: usize,
    },
}

fn default_cv_folds() -> usize {
    5
}

impl Default for Learner {
    /// Linear model with pairwise interactions stacked with kernel regression.
    fn default() -> Self {
        Learner::Ensemble {
            members: vec![Learner::Linear { basis: Basis::Pairwise }, Learner::Kernel { bandwidth: BandwidthRule::NormalScale }],
            folds: default_cv_folds(),
        }
    }
}

/// A fitted regression function.
#[derive(Clone, Debug)]
pub enum Fitted {
    Constant(f64),
    Linear { basis: Basis, coef: Vec<f64> },
    Logistic { basis: Basis, coef: Vec<f64> },
    Kernel { kde: Kde<f64>, y: Vec<f64>, fallback: f64 },
    Ensemble { members: Vec<Fitted>, weights: Vec<f64> },
}

impl Fitted {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Fitted::Constant(c) => *c,
            Fitted::Linear { basis, coef } => dot(&basis.expand(x), coef),
            Fitted::Logistic { basis, coef } => logistic(dot(&basis.expand(x), coef)),
            Fitted::Kernel { kde, y, fallback } => {
                let (a, b) = kde.kernel_sums(x, y);
                if a > 1e-300 {
                    b / a
                } else {
                    *fallback
                }
            }
            Fitted::Ensemble { members, weights } => members.iter().zip(weights).map(|(m, w)| w * m.predict(x)).sum(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A regression fit and whether a ridge fallback was needed.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: Fitted,
    pub ridge: bool,
}

fn weighted_mean_or_zero(y: &[f64], w: &[f64]) -> f64 {
    let tw: f64 = w.iter().sum();
    if tw > 0.0 {
        y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tw
    } else {
        0.0
    }
}

fn fit_linear(basis: Basis, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Fit> {
    let rows: Vec<Vec<f64>> = x.iter().map(|r| basis.expand(r)).collect();
    let p = rows.first().map_or(1, |r| r.len());
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for ((r, &yi), &wi) in rows.iter().zip(y).zip(w) {
        for i in 0..p {
            let v = wi * r[i];
            b[i] += v * yi;
            for k in i..p {
                a[(i, k)] += v * r[k];
            }
        }
    }
    for i in 0..p {
        for k in 0..i {
            a[(i, k)] = a[(k, i)];
        }
    }
    let (coef, ridge) = solve_psd(&a, &b)?;
    Ok(Fit { model: Fitted::Linear { basis, coef: coef.iter().copied().collect() }, ridge })
}

const IRLS_MAX: usize = 50;

fn fit_logistic(basis: Basis, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Fit> {
    let rows: Vec<Vec<f64>> = x.iter().map(|r| basis.expand(r)).collect();
    let p = rows.first().map_or(1, |r| r.len());
    let mut coef = vec![0.0; p];
    let ybar = weighted_mean_or_zero(y, w).clamp(1e-6, 1.0 - 1e-6);
    coef[0] = (ybar / (1.0 - ybar)).ln();
    let mut ridge = false;
    for _ in 0..IRLS_MAX {
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for ((r, &yi), &wi) in rows.iter().zip(y).zip(w) {
            let mu = logistic(dot(r, &coef));
            let v = wi * mu * (1.0 - mu);
            for i in 0..p {
                g[i] += wi * r[i] * (yi - mu);
                for k in i..p {
                    a[(i, k)] += v * r[i] * r[k];
                }
            }
        }
        for i in 0..p {
            for k in 0..i {
                a[(i, k)] = a[(k, i)];
            }
        }
        let (step, r) = solve_psd(&a, &g)?;
        ridge |= r;
        let mut moved: f64 = 0.0;
        for i in 0..p {
            coef[i] += step[i];
            moved = moved.max(step[i].abs());
        }
        if !coef.iter().all(|c| c.is_finite()) {
            return Err(FusionError::Numerical("logistic fit diverged".into()));
        }
        if moved < 1e-10 {
            break;
        }
    }
    Ok(Fit { model: Fitted::Logistic { basis, coef }, ridge })
}

fn fit_kernel(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Fit {
    let fallback = weighted_mean_or_zero(y, w);
    if x.first().is_none_or(|r| r.is_empty()) {
        return Fit { model: Fitted::Constant(fallback), ridge: false };
    }
    let d = x[0].len();
    let cols: Vec<Vec<f64>> = (0..d).map(|k| x.iter().map(|r| r[k]).collect()).collect();
    let kde = Kde::new(x, Some(w), normal_scale_product(&cols));
    Fit { model: Fitted::Kernel { kde, y: y.to_vec(), fallback }, ridge: false }
}

/// Least squares over the probability simplex by projected gradient.
fn simplex_weights(preds: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let m = preds.len();
    let mut a = vec![vec![0.0; m]; m];
    let mut b = vec![0.0; m];
    for i in 0..y.len() {
        for p in 0..m {
            b[p] += w[i] * preds[p][i] * y[i];
            for q in 0..m {
                a[p][q] += w[i] * preds[p][i] * preds[q][i];
            }
        }
    }
    let lip: f64 = (0..m).map(|p| a[p][p]).sum::<f64>().max(1e-300);
    let mut alpha = vec![1.0 / m as f64; m];
    for _ in 0..5000 {
        let grad: Vec<f64> = (0..m).map(|p| (0..m).map(|q| a[p][q] * alpha[q]).sum::<f64>() - b[p]).collect();
        let next: Vec<f64> = alpha.iter().zip(&grad).map(|(x, g)| x - g / lip).collect();
        let next = project_simplex(&next);
        let moved = next.iter().zip(&alpha).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        alpha = next;
        if moved < 1e-12 {
            break;
        }
    }
    alpha
}

/// Euclidean projection onto `{α ≥ 0, Σα = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Fits `learner` to rows `x` with targets `y` and weights `w`.
pub fn fit_regression(learner: &Learner, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Fit> {
    if y.is_empty() {
        return Err(FusionError::Precondition("empty pool for regression".into()));
    }
    if x.first().is_none_or(|r| r.is_empty()) && !matches!(learner, Learner::Logistic { .. }) {
        return Ok(Fit { model: Fitted::Constant(weighted_mean_or_zero(y, w)), ridge: false });
    }
    match learner {
        Learner::Linear { basis } => fit_linear(*basis, x, y, w),
        Learner::Logistic { basis } => fit_logistic(*basis, x, y, w),
        Learner::Kernel { .. } => Ok(fit_kernel(x, y, w)),
        Learner::KernelDensity { .. } => Err(FusionError::Config("kernel_density is a density learner, not a regression".into())),
        Learner::Ensemble { members, folds } => {
            if members.is_empty() {
                return Err(FusionError::Config("ensemble needs at least one member".into()));
            }
            let k = (*folds).clamp(2, y.len().max(2));
            let mut oof = vec![vec![0.0; y.len()]; members.len()];
            for f in 0..k {
                let train: Vec<usize> = (0..y.len()).filter(|i| i % k != f).collect();
                let test: Vec<usize> = (0..y.len()).filter(|i| i % k == f).collect();
                if train.is_empty() || test.is_empty() {
                    continue;
                }
                let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
                let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let tw: Vec<f64> = train.iter().map(|&i| w[i]).collect();
                for (mi, m) in members.iter().enumerate() {
                    let fit = fit_regression(m, &tx, &ty, &tw)?;
                    for &i in &test {
                        oof[mi][i] = fit.model.predict(&x[i]);
                    }
                }
            }
            let weights = simplex_weights(&oof, y, w);
            let mut fitted = Vec::with_capacity(members.len());
            let mut ridge = false;
            for m in members {
                let f = fit_regression(m, x, y, w)?;
                ridge |= f.ridge;
                fitted.push(f.model);
            }
            Ok(Fit { model: Fitted::Ensemble { members: fitted, weights }, ridge })
        }
    }
}

/// Regression of `target(record)` on `features(record)` over the given rows,
/// skipping rows where either is unavailable.
pub fn fit_conditional_mean(
    ds: &FusedDataset,
    rows: &[usize],
    target: &dyn Fn(&ObservationRecord) -> Option<f64>,
    features: &dyn Fn(&ObservationRecord) -> Option<Vec<f64>>,
    learner: &Learner,
) -> Result<Fit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for &i in rows {
        let r = &ds.records[i];
        if let (Some(t), Some(f)) = (target(r), features(r)) {
            x.push(f);
            y.push(t);
            w.push(r.w);
        }
    }
    if y.is_empty() {
        return Err(FusionError::Precondition("empty pool for conditional mean".into()));
    }
    fit_regression(learner, &x, &y, &w)
}

/// Stratum key built from discrete values.
pub type Key = Vec<u64>;

pub fn key_of(vals: &[f64]) -> Key {
    vals.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Whether each coordinate is treated as discrete: categorical columns, and
/// real columns with few distinct integer values.
pub fn infer_discrete(ds: &FusedDataset) -> Vec<bool> {
    (1..=ds.spec.d)
        .map(|j| {
            if matches!(ds.columns.get(j - 1).map(|c| &c.kind), Some(ColumnKind::Categorical { .. })) {
                return true;
            }
            let mut seen = BTreeSet::new();
            for r in &ds.records {
                if let Some(v) = r.get(j) {
                    if v.fract() != 0.0 {
                        return false;
                    }
                    seen.insert(key_of(&[v]));
                    if seen.len() > MAX_DISCRETE_LEVELS {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// One conditioning sample for a conditional law: value, discrete history,
/// continuous history and weight.
#[derive(Clone, Debug)]
pub struct LawSample {
    pub z: f64,
    pub hd: Vec<f64>,
    pub hc: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug)]
enum LawStratum {
    /// Joint KDE of `(z, hc)` and marginal KDE of `hc`.
    Density { joint: Kde<f64>, marg: Option<Kde<f64>> },
    /// Kernel-weighted level proportions; `per_level` KDEs over `hc` share the
    /// marginal bandwidths.
    Probs { levels: Vec<f64>, mass: Vec<f64>, per_level: Vec<Option<Kde<f64>>>, marg: Option<Kde<f64>> },
}

/// Conditional law of one coordinate given its history, stratified on the
/// discrete part of the history.
#[derive(Clone, Debug)]
pub struct CondLaw {
    pub discrete: bool,
    strata: BTreeMap<Key, LawStratum>,
}

impl CondLaw {
    pub fn fit(samples: &[LawSample], discrete: bool) -> Result<CondLaw> {
        if samples.is_empty() {
            return Err(FusionError::Precondition("empty pool for conditional law".into()));
        }
        let mut groups: BTreeMap<Key, Vec<&LawSample>> = BTreeMap::new();
        for s in samples {
            groups.entry(key_of(&s.hd)).or_default().push(s);
        }
        let mut strata = BTreeMap::new();
        for (key, g) in groups {
            let dc = g[0].hc.len();
            let w: Vec<f64> = g.iter().map(|s| s.w).collect();
            let marg = if dc > 0 {
                let pts: Vec<Vec<f64>> = g.iter().map(|s| s.hc.clone()).collect();
                Some(Kde::fit(&pts, Some(&w)))
            } else {
                None
            };
            let stratum = if discrete {
                let mut levels: Vec<f64> = g.iter().map(|s| s.z).collect();
                levels.sort_by(|a, b| a.total_cmp(b));
                levels.dedup();
                let tw: f64 = w.iter().sum();
                let mut mass = Vec::new();
                let mut per_level = Vec::new();
                for &v in &levels {
                    let sub: Vec<&&LawSample> = g.iter().filter(|s| s.z == v).collect();
                    let sw: Vec<f64> = sub.iter().map(|s| s.w).collect();
                    mass.push(sw.iter().sum::<f64>() / tw);
                    per_level.push(marg.as_ref().map(|m| {
                        let pts: Vec<Vec<f64>> = sub.iter().map(|s| s.hc.clone()).collect();
                        Kde::new(&pts, Some(&sw), m.bandwidths())
                    }));
                }
                LawStratum::Probs { levels, mass, per_level, marg }
            } else {
                let pts: Vec<Vec<f64>> = g.iter().map(|s| std::iter::once(s.z).chain(s.hc.iter().copied()).collect()).collect();
                LawStratum::Density { joint: Kde::fit(&pts, Some(&w)), marg }
            };
            strata.insert(key, stratum);
        }
        Ok(CondLaw { discrete, strata })
    }

    /// Conditional density (or probability) of `z` given the history; zero
    /// when the stratum is absent or the history has no mass.
    pub fn eval(&self, z: f64, hd: &[f64], hc: &[f64]) -> f64 {
        let Some(st) = self.strata.get(&key_of(hd)) else {
            return 0.0;
        };
        match st {
            LawStratum::Density { joint, marg } => {
                let mut x = Vec::with_capacity(1 + hc.len());
                x.push(z);
                x.extend_from_slice(hc);
                let fj = joint.density(&x);
                match marg {
                    Some(m) => {
                        let fm = m.density(hc);
                        if fm > 0.0 {
                            fj / fm
                        } else {
                            0.0
                        }
                    }
                    None => fj,
                }
            }
            LawStratum::Probs { levels, mass, per_level, marg } => {
                let Some(i) = levels.iter().position(|&v| v == z) else {
                    return 0.0;
                };
                match (marg, &per_level[i]) {
                    (Some(m), Some(k)) => {
                        let fm = m.density(hc);
                        if fm > 0.0 {
                            mass[i] * k.density(hc) / fm
                        } else {
                            0.0
                        }
                    }
                    _ => mass[i],
                }
            }
        }
    }
}

/// Counts of clipped evaluations and of evaluations found off the target
/// support.
#[derive(Debug, Default)]
pub struct ClipCounter {
    pub clipped: AtomicUsize,
    pub total: AtomicUsize,
    pub off_support: AtomicUsize,
}

impl ClipCounter {
    /// Clips `x` to `[1/c, c]`, counting the evaluation.
    pub fn clip(&self, x: f64, c: f64) -> f64 {
        self.total.fetch_add(1, Ordering::Relaxed);
        let lo = 1.0 / c;
        if !(x >= lo && x <= c) {
            self.clipped.fetch_add(1, Ordering::Relaxed);
            if x.is_nan() || x < lo {
                return lo;
            }
            return c;
        }
        x
    }

    /// Counts an evaluation that was set to zero off the support.
    pub fn mark_off_support(&self) {
        self.total.fetch_add(1, Ordering::Relaxed);
        self.off_support.fetch_add(1, Ordering::Relaxed);
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.clipped.load(Ordering::Relaxed), self.total.load(Ordering::Relaxed))
    }

    pub fn off_support_count(&self) -> usize {
        self.off_support.load(Ordering::Relaxed)
    }

    pub fn add(&self, other: &ClipCounter) {
        let (c, t) = other.counts();
        self.clipped.fetch_add(c, Ordering::Relaxed);
        self.total.fetch_add(t, Ordering::Relaxed);
        self.off_support.fetch_add(other.off_support_count(), Ordering::Relaxed);
    }
}

impl Clone for ClipCounter {
    fn clone(&self) -> Self {
        let (c, t) = self.counts();
        ClipCounter { clipped: AtomicUsize::new(c), total: AtomicUsize::new(t), off_support: AtomicUsize::new(self.off_support_count()) }
    }
}

/// Propensity model for a discrete coordinate: one logistic fit per level
/// (a single fit for binary), normalized across levels and trimmed.
#[derive(Clone, Debug)]
pub struct Propensity {
    pub levels: Vec<f64>,
    fits: Vec<Fitted>,
    pub trim: f64,
}

impl Propensity {
    pub fn fit(learner: &Learner, x: &[Vec<f64>], z: &[f64], w: &[f64], trim: f64) -> Result<(Propensity, bool)> {
        let mut levels: Vec<f64> = z.to_vec();
        levels.sort_by(|a, b| a.total_cmp(b));
        levels.dedup();
        let mut ridge = false;
        let mut fits = Vec::new();
        let n_fits = if levels.len() == 2 { 1 } else { levels.len() };
        for &v in levels.iter().take(n_fits) {
            let y: Vec<f64> = z.iter().map(|&zi| if zi == v { 1.0 } else { 0.0 }).collect();
            let f = fit_regression(learner, x, &y, w)?;
            ridge |= f.ridge;
            fits.push(f.model);
        }
        Ok((Propensity { levels, fits, trim }, ridge))
    }

    /// Trimmed probability of level `v`; zero for unseen levels.
    pub fn prob(&self, x: &[f64], v: f64) -> f64 {
        let Some(i) = self.levels.iter().position(|&l| l == v) else {
            return 0.0;
        };
        let raw = if self.levels.len() == 1 {
            1.0
        } else if self.levels.len() == 2 {
            let p1 = self.fits[0].predict(x).clamp(0.0, 1.0);
            if i == 0 {
                p1
            } else {
                1.0 - p1
            }
        } else {
            let ps: Vec<f64> = self.fits.iter().map(|f| f.predict(x).max(0.0)).collect();
            let tot: f64 = ps.iter().sum();
            if tot > 0.0 {
                ps[i] / tot
            } else {
                1.0 / self.levels.len() as f64
            }
        };
        raw.clamp(self.trim, 1.0 - self.trim)
    }
}

/// Nuisance options as read from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceOptions {
    pub folds: usize,
    pub clip_c: f64,
    pub trim_eps: f64,
    pub bandwidth_rule: BandwidthRule,
    pub outcome_learner: Learner,
    pub propensity_learner: Learner,
    /// Learner for the score regressions of the symmetric outcome model.
    pub score_learner: Learner,
    /// Seed of the fold shuffle.
    pub fold_seed: u64,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            folds: 2,
            clip_c: DEFAULT_CLIP,
            trim_eps: DEFAULT_TRIM,
            bandwidth_rule: BandwidthRule::NormalScale,
            outcome_learner: Learner::default(),
            propensity_learner: Learner::Logistic { basis: Basis::Linear },
            score_learner: Learner::Kernel { bandwidth: BandwidthRule::NormalScale },
            fold_seed: 0,
        }
    }
}

impl NuisanceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(FusionError::Config("folds must be at least 1".into()));
        }
        if !(self.clip_c > 1.0) {
            return Err(FusionError::Config("clip_c must exceed 1".into()));
        }
        if !(self.trim_eps >= 0.0 && self.trim_eps < 0.5) {
            return Err(FusionError::Config("trim_eps must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// `P(S ∈ S_j)` for every relevant `j`, as weighted frequencies.
pub fn source_probs(ds: &FusedDataset) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for &j in &ds.spec.relevant {
        let p = ds.source_prob(j)?;
        if !(p > 0.0) {
            return Err(FusionError::Data(format!("no rows from S_{j}")));
        }
        out.insert(j, p);
    }
    Ok(out)
}

/// Fold label per record, stratified by source: rows of each source are
/// shuffled with `seed` and dealt round-robin.
pub fn fold_assignment(ds: &FusedDataset, folds: usize, seed: u64) -> Vec<usize> {
    let mut out = vec![0; ds.len()];
    if folds <= 1 {
        return out;
    }
    let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_source.entry(r.s).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rows in by_source.values_mut() {
        for i in (1..rows.len()).rev() {
            let k = rng.random_range(0..=i);
            rows.swap(i, k);
        }
        for (pos, &i) in rows.iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    out
}

/// Splits a history into discrete and continuous parts.
pub fn split_history(h: &[f64], discrete: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut hd = Vec::new();
    let mut hc = Vec::new();
    for (m, &v) in h.iter().enumerate() {
        if discrete[m] {
            hd.push(v);
        } else {
            hc.push(v);
        }
    }
    (hd, hc)
}

/// Fits the law of `Z_m` given `Z̄_{m−1}` on the given rows.
pub fn fit_law(ds: &FusedDataset, rows: &[usize], m: usize, discrete: &[bool]) -> Result<CondLaw> {
    let samples: Vec<LawSample> = rows
        .iter()
        .filter_map(|&i| {
            let r = &ds.records[i];
            let h = r.history(m)?;
            let (hd, hc) = split_history(&h[..m - 1], discrete);
            Some(LawSample { z: h[m - 1], hd, hc, w: r.w })
        })
        .collect();
    CondLaw::fit(&samples, discrete[m - 1])
}

/// Stratified KDE of a full history vector.
#[derive(Clone, Debug)]
struct JointDensity {
    strata: BTreeMap<Key, (f64, Option<Kde<f64>>)>,
}

impl JointDensity {
    fn fit(points: &[(Vec<f64>, f64)], discrete: &[bool]) -> JointDensity {
        let total: f64 = points.iter().map(|p| p.1).sum();
        let mut groups: BTreeMap<Key, Vec<(Vec<f64>, f64)>> = BTreeMap::new();
        for (h, w) in points {
            let (hd, hc) = split_history(h, discrete);
            groups.entry(key_of(&hd)).or_default().push((hc, *w));
        }
        let strata = groups
            .into_iter()
            .map(|(k, g)| {
                let mass = g.iter().map(|p| p.1).sum::<f64>() / total;
                let kde = if g[0].0.is_empty() {
                    None
                } else {
                    let pts: Vec<Vec<f64>> = g.iter().map(|p| p.0.clone()).collect();
                    let w: Vec<f64> = g.iter().map(|p| p.1).collect();
                    Some(Kde::fit(&pts, Some(&w)))
                };
                (k, (mass, kde))
            })
            .collect();
        JointDensity { strata }
    }

    fn eval(&self, h: &[f64], discrete: &[bool]) -> f64 {
        let (hd, hc) = split_history(h, discrete);
        match self.strata.get(&key_of(&hd)) {
            Some((mass, Some(k))) => mass * k.density(&hc),
            Some((mass, None)) => *mass,
            None => 0.0,
        }
    }
}

/// Density ratio `λ_{j−1}` of the target marginal of `Z̄_{j−1}` over its law
/// among `S_j`, clipped to `[1/c, c]`.
#[derive(Debug)]
pub struct DensityRatio {
    pub j: usize,
    pub c: f64,
    discrete: Vec<bool>,
    num: Option<JointDensity>,
    den: Option<JointDensity>,
    pub clips: ClipCounter,
}

impl DensityRatio {
    /// `λ_{j−1}(z̄_{j−1})`.
    pub fn eval(&self, h: &[f64]) -> f64 {
        match (&self.num, &self.den) {
            (Some(n), Some(d)) => {
                let dn = d.eval(h, &self.discrete);
                let nn = n.eval(h, &self.discrete);
                let raw = if dn > 0.0 { nn / dn } else { f64::INFINITY };
                self.clips.clip(raw, self.c)
            }
            _ => 1.0,
        }
    }
}

/// Draws `n` histories `Z̄_{j−1}` from `θ(P̂)`: relevant coordinates from
/// their laws pooled over `S_m`, irrelevant ones pooled over all sources.
/// Draws come from the fitted kernel laws: a donor is picked with
/// probability proportional to its kernel weight at the current history and
/// continuous values are jittered by the bandwidth.
pub fn simulate_target_histories(ds: &FusedDataset, j: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let discrete = infer_discrete(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::new();
    for m in 1..j {
        let rows: Vec<usize> = if ds.spec.is_relevant(m) {
            ds.pooled_indices(m)?
        } else {
            (0..ds.len()).collect()
        };
        let pts: Vec<(Vec<f64>, f64)> = rows.iter().filter_map(|&i| ds.records[i].history(m).map(|h| (h, ds.records[i].w))).collect();
        if pts.is_empty() {
            return Err(FusionError::Precondition(format!("empty pool for coordinate {m}")));
        }
        let cont: Vec<usize> = (0..m - 1).filter(|&q| !discrete[q]).collect();
        let cols: Vec<Vec<f64>> = cont.iter().map(|&q| pts.iter().map(|p| p.0[q]).collect()).chain(std::iter::once(pts.iter().map(|p| p.0[m - 1]).collect())).collect();
        let h = normal_scale_product(&cols);
        pools.push((pts, cont, h));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut h: Vec<f64> = Vec::with_capacity(j - 1);
        for m in 1..j {
            let (pts, cont, bw) = &pools[m - 1];
            let weights: Vec<f64> = pts
                .iter()
                .map(|(p, w)| {
                    if (0..m - 1).any(|q| discrete[q] && p[q] != h[q]) {
                        return 0.0;
                    }
                    let q2: f64 = cont.iter().enumerate().map(|(k, &q)| ((h[q] - p[q]) / bw[k]).powi(2)).sum();
                    w * (-0.5 * q2).exp()
                })
                .collect();
            let tot: f64 = weights.iter().sum();
            if !(tot > 0.0) {
                return Err(FusionError::Numerical(format!("no donors for coordinate {m} at a simulated history")));
            }
            let mut u = rng.random::<f64>() * tot;
            let mut pick = pts.len() - 1;
            for (i, &wi) in weights.iter().enumerate() {
                if u < wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            let mut v = pts[pick].0[m - 1];
            if !discrete[m - 1] {
                let z: f64 = rng.sample(StandardNormal);
                v += bw[bw.len() - 1] * z;
            }
            h.push(v);
        }
        out.push(h);
    }
    Ok(out)
}

/// Fits `λ_{j−1}`: the numerator is a KDE of `max(5000, n)` histories drawn
/// from `θ(P̂)`, the denominator a KDE of the `S_j` rows. `λ₀ ≡ 1`.
pub fn fit_density_ratio(ds: &FusedDataset, j: usize, c: f64, seed: u64) -> Result<DensityRatio> {
    let discrete = infer_discrete(ds);
    if j <= 1 {
        return Ok(DensityRatio { j, c, discrete, num: None, den: None, clips: ClipCounter::default() });
    }
    if !ds.spec.is_relevant(j) {
        return Err(FusionError::Precondition(format!("coordinate {j} is not relevant")));
    }
    let den_pts: Vec<(Vec<f64>, f64)> = ds
        .pooled_indices(j)?
        .into_iter()
        .filter_map(|i| ds.records[i].history(j - 1).map(|h| (h, ds.records[i].w)))
        .collect();
    if den_pts.is_empty() {
        return Err(FusionError::Precondition(format!("no rows from S_{j}")));
    }
    let draws = simulate_target_histories(ds, j, MIN_TARGET_DRAWS.max(ds.len()), seed)?;
    let num_pts: Vec<(Vec<f64>, f64)> = draws.into_iter().map(|h| (h, 1.0)).collect();
    let d = &discrete[..j - 1];
    Ok(DensityRatio {
        j,
        c,
        discrete: d.to_vec(),
        num: Some(JointDensity::fit(&num_pts, d)),
        den: Some(JointDensity::fit(&den_pts, d)),
        clips: ClipCounter::default(),
    })
}

/// Outcome coordinate and interventions an estimand needs nuisances for.
#[derive(Clone, Debug)]
pub struct Requirements {
    pub y: usize,
    /// Interventions per arm, keyed by irrelevant coordinate.
    pub arms: Vec<BTreeMap<usize, Policy>>,
}

impl Requirements {
    /// Relevant coordinates up to the outcome, ascending.
    pub fn relevant(&self, spec: &FusionSpec) -> Vec<usize> {
        (1..=self.y).filter(|&j| spec.is_relevant(j)).collect()
    }

    /// Every irrelevant coordinate up to the outcome must be intervened on in
    /// every arm, be discrete, and relevant coordinates must not be.
    pub fn check(&self, spec: &FusionSpec, discrete: &[bool]) -> Result<()> {
        if self.y == 0 || self.y > spec.d {
            return Err(FusionError::Config(format!("outcome coordinate {} outside 1..{}", self.y, spec.d)));
        }
        if !spec.is_relevant(self.y) {
            return Err(FusionError::Config(format!("outcome coordinate {} must be relevant", self.y)));
        }
        for arm in &self.arms {
            for &m in arm.keys() {
                if spec.is_relevant(m) {
                    return Err(FusionError::Config(format!("intervened coordinate {m} must be irrelevant")));
                }
            }
            for m in 1..self.y {
                if !spec.is_relevant(m) {
                    if !arm.contains_key(&m) {
                        return Err(FusionError::Config(format!("coordinate {m} enters the functional but is irrelevant")));
                    }
                    if !discrete[m - 1] {
                        return Err(FusionError::Config(format!("intervened coordinate {m} must be discrete")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Values of the relevant coordinates among the first `len` slots.
pub fn relevant_part(z: &[f64], len: usize, spec: &FusionSpec) -> Vec<f64> {
    (1..=len).filter(|&m| spec.is_relevant(m)).map(|m| z[m - 1]).collect()
}

/// Key of the irrelevant coordinates among the first `len` slots.
pub fn irrelevant_key(z: &[f64], len: usize, spec: &FusionSpec) -> Key {
    let v: Vec<f64> = (1..=len).filter(|&m| !spec.is_relevant(m)).map(|m| z[m - 1]).collect();
    key_of(&v)
}

/// Fitted nuisances shared by all outcome regressions of one estimand on one
/// training fold: conditional laws `P(z_m | z̄_{m−1}, S_j)` (one per pool,
/// reused for every source in it), propensities of intervened coordinates,
/// and source probabilities.
#[derive(Clone, Debug)]
pub struct NuisanceFit {
    pub spec: FusionSpec,
    pub y: usize,
    pub relevant: Vec<usize>,
    pub discrete: Vec<bool>,
    pub source_probs: BTreeMap<usize, f64>,
    /// `(m, j)` ↦ law of `Z_m` given history among `S_j`.
    pub laws: BTreeMap<(usize, usize), CondLaw>,
    /// `(m, j)` ↦ propensity of `Z_m` among `S_j`, by irrelevant-history key.
    pub propensities: BTreeMap<(usize, usize), BTreeMap<Key, Propensity>>,
    pub clip_c: f64,
    pub trim: f64,
    pub clips: ClipCounter,
    pub ridge_fits: usize,
}

/// Fits the shared nuisances on the training rows.
pub fn fit_all(
    ds: &FusedDataset,
    dense: &Dense,
    train: &[usize],
    req: &Requirements,
    opts: &NuisanceOptions,
    source_probs: &BTreeMap<usize, f64>,
    discrete: &[bool],
) -> Result<NuisanceFit> {
    let spec = &ds.spec;
    req.check(spec, discrete)?;
    let relevant = req.relevant(spec);
    let mut laws = BTreeMap::new();
    let mut propensities = BTreeMap::new();
    let mut ridge_fits = 0;
    for &j in &relevant {
        let sj = spec.fusion_set(j)?;
        let pool: Vec<usize> = train.iter().copied().filter(|&i| sj.contains(&dense.s[i])).collect();
        for m in 1..j {
            if spec.is_relevant(m) {
                if spec.fusion_set(m)? == sj {
                    continue;
                }
                for key in [(m, m), (m, j)] {
                    if !laws.contains_key(&key) {
                        let rows: Vec<usize> = train.iter().copied().filter(|&i| spec.in_fusion_set(key.1, dense.s[i])).collect();
                        laws.insert(key, fit_law_dense(dense, &rows, m, discrete)?);
                    }
                }
            } else {
                let mut groups: BTreeMap<Key, (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
                for &i in &pool {
                    if !dense.observed_through(i, m) {
                        continue;
                    }
                    let z = &dense.z[i];
                    let g = groups.entry(irrelevant_key(z, m - 1, spec)).or_default();
                    g.0.push(relevant_part(z, m - 1, spec));
                    g.1.push(z[m - 1]);
                    g.2.push(dense.w[i]);
                }
                let mut fits = BTreeMap::new();
                for (key, (x, z, w)) in groups {
                    let (p, ridge) = Propensity::fit(&opts.propensity_learner, &x, &z, &w, opts.trim_eps)?;
                    ridge_fits += ridge as usize;
                    fits.insert(key, p);
                }
                propensities.insert((m, j), fits);
            }
        }
    }
    Ok(NuisanceFit {
        spec: spec.clone(),
        y: req.y,
        relevant,
        discrete: discrete.to_vec(),
        source_probs: source_probs.clone(),
        laws,
        propensities,
        clip_c: opts.clip_c,
        trim: opts.trim_eps,
        clips: ClipCounter::default(),
        ridge_fits,
    })
}

fn fit_law_dense(dense: &Dense, rows: &[usize], m: usize, discrete: &[bool]) -> Result<CondLaw> {
    let samples: Vec<LawSample> = rows
        .iter()
        .filter(|&&i| dense.observed_through(i, m))
        .map(|&i| {
            let z = &dense.z[i];
            let (hd, hc) = split_history(&z[..m - 1], discrete);
            LawSample { z: z[m - 1], hd, hc, w: dense.w[i] }
        })
        .collect();
    CondLaw::fit(&samples, discrete[m - 1])
}

impl NuisanceFit {
    /// Clipped `Π_{m<j, m∈J} P(z_m|·,S_m)/P(z_m|·,S_j)`, the relevant part of
    /// `λ_{j−1}`; zero off the estimated target support, which is where the
    /// product is at most `1/c`.
    pub fn lambda_part(&self, z: &[f64], j: usize) -> f64 {
        let mut prod = 1.0;
        let mut any = false;
        for &m in self.relevant.iter().take_while(|&&m| m < j) {
            let (Some(num), Some(den)) = (self.laws.get(&(m, m)), self.laws.get(&(m, j))) else {
                continue;
            };
            any = true;
            let (hd, hc) = split_history(&z[..m - 1], &self.discrete);
            let nv = num.eval(z[m - 1], &hd, &hc);
            if !(nv > 0.0) {
                self.clips.mark_off_support();
                return 0.0;
            }
            let dv = den.eval(z[m - 1], &hd, &hc);
            prod *= if dv > 0.0 { nv / dv } else { f64::INFINITY };
        }
        if !any {
            return 1.0;
        }
        if prod.is_finite() && prod <= 1.0 / self.clip_c {
            self.clips.mark_off_support();
            return 0.0;
        }
        self.clips.clip(prod, self.clip_c)
    }

    /// `Π_{m<j, m∈I} g*_m(z_m | z̄_{m−1}) / P(z_m | z̄_{m−1}, S_j)`.
    pub fn treatment_part(&self, z: &[f64], j: usize, arm: &BTreeMap<usize, Policy>) -> f64 {
        let mut prod = 1.0;
        for m in 1..j {
            if self.spec.is_relevant(m) {
                continue;
            }
            let Some(pol) = arm.get(&m) else {
                return 0.0;
            };
            let g = pol.prob(&z[..m - 1], z[m - 1]);
            if g == 0.0 {
                return 0.0;
            }
            let pi = self
                .propensities
                .get(&(m, j))
                .and_then(|f| f.get(&irrelevant_key(z, m - 1, &self.spec)))
                .map(|p| p.prob(&relevant_part(z, m - 1, &self.spec), z[m - 1]))
                .unwrap_or(0.0);
            if !(pi > 0.0) {
                return 0.0;
            }
            prod *= g / pi;
        }
        prod
    }

    /// Weights `1(s∈S_j) ρ_j(z) / P(S∈S_j)` for each arm and each relevant
    /// `j ≤ y` (in the order of `self.relevant`).
    pub fn row_weights(&self, dense: &Dense, i: usize, arms: &[BTreeMap<usize, Policy>]) -> Vec<Vec<f64>> {
        let z = &dense.z[i];
        let mut out = vec![vec![0.0; self.relevant.len()]; arms.len()];
        for (pos, &j) in self.relevant.iter().enumerate() {
            if !self.spec.in_fusion_set(j, dense.s[i]) || !dense.observed_through(i, j) {
                continue;
            }
            let tp: Vec<f64> = arms.iter().map(|a| self.treatment_part(z, j, a)).collect();
            if tp.iter().all(|&t| t == 0.0) {
                continue;
            }
            let lam = self.lambda_part(z, j);
            let pj = self.source_probs[&j];
            for (a, t) in tp.iter().enumerate() {
                out[a][pos] = lam * t / pj;
            }
        }
        out
    }
}
