//! Sequential regressions of an outcome function under interventions, the
//! plug-in `φ(P̂)` and the per-coordinate terms of the fused gradient on data.

use crate::data::{Dense, FusionSpec};
use crate::error::{FusionError, Result};
use crate::estimands::Policy;
use crate::nuisance::{irrelevant_key, relevant_part, Fitted, Key, Learner, NuisanceFit, Requirements};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Function of `z̄_y`.
pub type OutcomeFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Replacement for the last regression `V_{y−1}`, a function of `z̄_{y−1}`.
pub type TopFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Mean of `outcome(Z̄_y)` under per-arm interventions, contrasted by `coefs`.
#[derive(Clone)]
pub struct SeqPlan {
    pub y: usize,
    pub outcome: OutcomeFn,
    pub coefs: Vec<f64>,
    pub arms: Vec<BTreeMap<usize, Policy>>,
}

impl SeqPlan {
    /// Plain mean of coordinate `y`.
    pub fn mean(y: usize) -> Self {
        SeqPlan { y, outcome: Arc::new(move |z: &[f64]| z[y - 1]), coefs: vec![1.0], arms: vec![BTreeMap::new()] }
    }

    /// `E[Z_y | do(treated = 1)] − E[Z_y | do(treated = 0)]`.
    pub fn static_contrast(y: usize, treated: &[usize]) -> Self {
        let arm = |v: f64| treated.iter().map(|&j| (j, Policy::Static { value: v })).collect();
        SeqPlan { y, outcome: Arc::new(move |z: &[f64]| z[y - 1]), coefs: vec![1.0, -1.0], arms: vec![arm(1.0), arm(0.0)] }
    }

    pub fn with_outcome(mut self, outcome: OutcomeFn) -> Self {
        self.outcome = outcome;
        self
    }

    pub fn requirements(&self) -> Requirements {
        Requirements { y: self.y, arms: self.arms.clone() }
    }
}

/// Fitted regressions for one arm: `(j, key) ↦ V_{j−1}` for relevant `j`.
#[derive(Clone)]
struct ArmFit {
    models: BTreeMap<usize, BTreeMap<Key, Fitted>>,
    top: Option<TopFn>,
}

/// Sequential regressions `V_j` for each arm of a plan.
#[derive(Clone)]
pub struct SeqFit {
    pub plan: SeqPlan,
    spec: FusionSpec,
    arms: Vec<ArmFit>,
    pub ridge_fits: usize,
}

fn static_match(z: &[f64], len: usize, arm: &BTreeMap<usize, Policy>) -> bool {
    arm.iter().filter(|(&m, _)| m <= len).all(|(&m, p)| match p {
        Policy::Static { value } => z[m - 1] == *value,
        Policy::Softmax { .. } => true,
    })
}

impl SeqFit {
    /// Fits `V_{y−1}, …, V_0` backwards on the training rows. Regressions at a
    /// relevant `j` pool rows from `S_j`, are split by the values of the
    /// intervened coordinates in `z̄_{j−1}` and use the relevant coordinates as
    /// features. `tops[a]`, when present, replaces arm `a`'s last regression.
    pub fn fit(dense: &Dense, train: &[usize], spec: &FusionSpec, plan: &SeqPlan, learner: &Learner, tops: Option<Vec<TopFn>>) -> Result<SeqFit> {
        let mut fit = SeqFit {
            plan: plan.clone(),
            spec: spec.clone(),
            arms: plan.arms.iter().map(|_| ArmFit { models: BTreeMap::new(), top: None }).collect(),
            ridge_fits: 0,
        };
        if let Some(t) = tops {
            for (a, top) in t.into_iter().enumerate() {
                fit.arms[a].top = Some(top);
            }
        }
        let relevant: Vec<usize> = (1..=plan.y).filter(|&j| spec.is_relevant(j)).collect();
        for a in 0..plan.arms.len() {
            for &j in relevant.iter().rev() {
                if j == 1 || (j == plan.y && fit.arms[a].top.is_some()) {
                    continue;
                }
                let sj = spec.fusion_set(j)?;
                let mut groups: BTreeMap<Key, (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
                for &i in train {
                    if !sj.contains(&dense.s[i]) || !dense.observed_through(i, j) {
                        continue;
                    }
                    let z = &dense.z[i];
                    if !static_match(z, j - 1, &plan.arms[a]) {
                        continue;
                    }
                    let target = fit.value(a, j, z);
                    let g = groups.entry(irrelevant_key(z, j - 1, spec)).or_default();
                    g.0.push(relevant_part(z, j - 1, spec));
                    g.1.push(target);
                    g.2.push(dense.w[i]);
                }
                if groups.is_empty() {
                    return Err(FusionError::Precondition(format!("empty pool for the regression at coordinate {j}")));
                }
                let mut fitted = BTreeMap::new();
                for (key, (x, y, w)) in groups {
                    let f = crate::nuisance::fit_regression(learner, &x, &y, &w)?;
                    fit.ridge_fits += f.ridge as usize;
                    fitted.insert(key, f.model);
                }
                fit.arms[a].models.insert(j, fitted);
            }
        }
        Ok(fit)
    }

    /// `V_j(z̄_j)` for arm `a`; only `z[..j]` is read. `NaN` when a needed
    /// regression stratum was never fitted.
    pub fn value(&self, a: usize, j: usize, z: &[f64]) -> f64 {
        let y = self.plan.y;
        if j == y {
            return (self.plan.outcome)(&z[..y]);
        }
        let nxt = j + 1;
        if self.spec.is_relevant(nxt) {
            if nxt == y {
                if let Some(top) = &self.arms[a].top {
                    return top(&z[..j]);
                }
            }
            return match self.arms[a].models.get(&nxt).and_then(|m| m.get(&irrelevant_key(z, j, &self.spec))) {
                Some(f) => f.predict(&relevant_part(z, j, &self.spec)),
                None => f64::NAN,
            };
        }
        let mut zz: Vec<f64> = z[..j].to_vec();
        zz.push(0.0);
        match &self.plan.arms[a][&nxt] {
            Policy::Static { value } => {
                zz[j] = *value;
                self.value(a, nxt, &zz)
            }
            Policy::Softmax { policy } => {
                let probs = policy.probs(&z[..j]);
                let mut acc = 0.0;
                for (v, p) in policy.actions.iter().zip(probs) {
                    if p > 0.0 {
                        zz[j] = *v;
                        acc += p * self.value(a, nxt, &zz);
                    }
                }
                acc
            }
        }
    }

    /// Plug-in value of each arm: `V_1` averaged over the given rows from
    /// `S_1` (or `V_0` directly when the first coordinate is intervened).
    pub fn arm_values(&self, dense: &Dense, rows: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.arms.len());
        for a in 0..self.arms.len() {
            if !self.spec.is_relevant(1) {
                out.push(self.value(a, 0, &[]));
                continue;
            }
            let s1 = self.spec.fusion_set(1)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for &i in rows {
                if s1.contains(&dense.s[i]) && dense.observed_through(i, 1) {
                    num += dense.w[i] * self.value(a, 1, &dense.z[i]);
                    den += dense.w[i];
                }
            }
            if !(den > 0.0) {
                return Err(FusionError::Precondition("no rows from S_1 to average over".into()));
            }
            out.push(num / den);
        }
        Ok(out)
    }

    /// `Σ_a coef_a ψ_a`.
    pub fn contrast(&self, arm_values: &[f64]) -> f64 {
        self.plan.coefs.iter().zip(arm_values).map(|(c, v)| c * v).sum()
    }

    /// Gradient terms `w_{a,j} (V_j − V_{j−1})` for each arm and relevant
    /// `j ≤ y`, given the row weights from [`NuisanceFit::row_weights`].
    pub fn terms(&self, z: &[f64], weights: &[Vec<f64>], arm_values: &[f64], relevant: &[usize]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; relevant.len()]; self.arms.len()];
        for a in 0..self.arms.len() {
            for (pos, &j) in relevant.iter().enumerate() {
                if j > self.plan.y {
                    break;
                }
                let w = weights[a][pos];
                if w == 0.0 {
                    continue;
                }
                let prev = if j == 1 { arm_values[a] } else { self.value(a, j - 1, z) };
                out[a][pos] = w * (self.value(a, j, z) - prev);
            }
        }
        out
    }

    /// Contrast of the summed terms.
    pub fn gradient(&self, terms: &[Vec<f64>]) -> f64 {
        terms.iter().zip(&self.plan.coefs).map(|(t, c)| c * t.iter().sum::<f64>()).sum()
    }
}

/// Weights for every evaluation row under a nuisance fit.
pub fn weights_for(nf: &NuisanceFit, dense: &Dense, rows: &[usize], arms: &[BTreeMap<usize, Policy>]) -> Vec<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    rows.par_iter().map(|&i| nf.row_weights(dense, i, arms)).collect()
}
