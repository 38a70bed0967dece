//! Finite joint laws of `(Z, S)` used as an exact oracle substrate.
//!
//! Coordinates take finitely many levels (each level may be a vector, for
//! repeated measures). Prefix tables over `z̄_j` are indexed row-major with
//! coordinate 1 most significant; observed-data functions are indexed
//! `z·k + (s−1)`.

use crate::data::FusionSpec;
use crate::error::{FusionError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Function of `(z, s)`, length `|Z|·k`.
pub type ObsFn = Vec<f64>;
/// Function of `z̄_j`, length of the prefix table at `j`.
pub type PrefixFn = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl Grid {
    /// Grid whose coordinates are scalars.
    pub fn scalar(levels: Vec<Vec<f64>>) -> Grid {
        Grid { levels: levels.into_iter().map(|l| l.into_iter().map(|v| vec![v]).collect()).collect() }
    }

    pub fn d(&self) -> usize {
        self.levels.len()
    }

    /// Number of levels of coordinate `j` (1-based).
    pub fn size(&self, j: usize) -> usize {
        self.levels[j - 1].len()
    }

    /// Number of prefixes `z̄_j`; `prefix_len(0) = 1`.
    pub fn prefix_len(&self, j: usize) -> usize {
        (1..=j).map(|m| self.size(m)).product()
    }

    pub fn len(&self) -> usize {
        self.prefix_len(self.d())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prefix index at `j` of full index `zi`.
    pub fn prefix_of(&self, zi: usize, j: usize) -> usize {
        let tail: usize = (j + 1..=self.d()).map(|m| self.size(m)).product();
        zi / tail
    }

    /// Prefix at `j − 1` of prefix `p` at `j`.
    pub fn parent(&self, p: usize, j: usize) -> usize {
        p / self.size(j)
    }

    /// Level of `z_j` within prefix `p` at `j`.
    pub fn last_level(&self, p: usize, j: usize) -> usize {
        p % self.size(j)
    }

    /// Level indices of coordinates `1..=j` in prefix `p`.
    pub fn decode(&self, mut p: usize, j: usize) -> Vec<usize> {
        let mut out = vec![0; j];
        for m in (1..=j).rev() {
            out[m - 1] = p % self.size(m);
            p /= self.size(m);
        }
        out
    }

    pub fn encode(&self, levels: &[usize]) -> usize {
        let mut p = 0;
        for (m, &l) in levels.iter().enumerate() {
            p = p * self.size(m + 1) + l;
        }
        p
    }

    /// Flattened component values of `z̄_j`.
    pub fn values(&self, p: usize, j: usize) -> Vec<f64> {
        let lv = self.decode(p, j);
        let mut out = Vec::new();
        for (m, &l) in lv.iter().enumerate() {
            out.extend_from_slice(&self.levels[m][l]);
        }
        out
    }

    /// First component of coordinate `m` within prefix `p` at `j ≥ m`.
    pub fn value(&self, p: usize, j: usize, m: usize) -> f64 {
        let q = self.prefix_of_prefix(p, j, m);
        self.levels[m - 1][self.last_level(q, m)][0]
    }

    /// Prefix at `m ≤ j` of prefix `p` at `j`.
    pub fn prefix_of_prefix(&self, p: usize, j: usize, m: usize) -> usize {
        let tail: usize = (m + 1..=j).map(|t| self.size(t)).product();
        p / tail
    }

    /// Per-coordinate first-component values of full index `zi`.
    pub fn point(&self, zi: usize) -> Vec<f64> {
        let lv = self.decode(zi, self.d());
        lv.iter().enumerate().map(|(m, &l)| self.levels[m][l][0]).collect()
    }

    /// Extends a prefix function at `j` to a function of the full `z`.
    pub fn extend(&self, f: &[f64], j: usize) -> Vec<f64> {
        (0..self.len()).map(|zi| f[self.prefix_of(zi, j)]).collect()
    }
}

/// Normalizes `tab` (over prefix `j`) into a conditional of `z_j` given
/// `z̄_{j−1}`, uniform where the history has no mass.
pub fn normalize_conditional(grid: &Grid, j: usize, tab: &[f64]) -> Vec<f64> {
    let l = grid.size(j);
    let mut out = vec![0.0; tab.len()];
    for h in 0..grid.prefix_len(j - 1) {
        let row = &tab[h * l..(h + 1) * l];
        let tot: f64 = row.iter().sum();
        for z in 0..l {
            out[h * l + z] = if tot > 0.0 { row[z] / tot } else { 1.0 / l as f64 };
        }
    }
    out
}

/// Target law `Q` given by its sequential conditionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetLaw {
    pub grid: Grid,
    /// `conds[j−1][p]` = `Q_j(z_j | z̄_{j−1})` at prefix `p` of `z̄_j`.
    pub conds: Vec<Vec<f64>>,
}

impl TargetLaw {
    pub fn new(grid: Grid, conds: Vec<Vec<f64>>) -> Self {
        TargetLaw { grid, conds }
    }

    pub fn d(&self) -> usize {
        self.grid.d()
    }

    pub fn cond(&self, j: usize) -> &[f64] {
        &self.conds[j - 1]
    }

    /// Marginal pmf of `z̄_j`.
    pub fn prefix_pmf(&self, j: usize) -> Vec<f64> {
        let mut cur = vec![1.0];
        for m in 1..=j {
            let l = self.grid.size(m);
            let c = self.cond(m);
            let mut next = vec![0.0; cur.len() * l];
            for (h, &ph) in cur.iter().enumerate() {
                for z in 0..l {
                    next[h * l + z] = ph * c[h * l + z];
                }
            }
            cur = next;
        }
        cur
    }

    pub fn joint(&self) -> Vec<f64> {
        self.prefix_pmf(self.d())
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.joint().iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// `E_Q[f | z̄_j]` for `j = 0..=d`, by backward recursion through the
    /// conditionals (defined on every prefix, including null ones).
    pub fn cond_exp_all(&self, f: &[f64]) -> Vec<Vec<f64>> {
        let d = self.d();
        let mut out = vec![Vec::new(); d + 1];
        out[d] = f.to_vec();
        for j in (1..=d).rev() {
            let l = self.grid.size(j);
            let c = self.cond(j);
            let cur = &out[j];
            let prev: Vec<f64> = (0..self.grid.prefix_len(j - 1))
                .map(|h| (0..l).map(|z| c[h * l + z] * cur[h * l + z]).sum())
                .collect();
            out[j - 1] = prev;
        }
        out
    }

    pub fn cond_exp(&self, f: &[f64], j: usize) -> Vec<f64> {
        self.cond_exp_all(f).swap_remove(j)
    }

    /// `D_j(z̄_j) = E[f|z̄_j] − E[f|z̄_{j−1}]` for `j = 1..=d`.
    pub fn decompose(&self, f: &[f64]) -> Vec<PrefixFn> {
        let e = self.cond_exp_all(f);
        (1..=self.d())
            .map(|j| {
                let l = self.grid.size(j);
                (0..e[j].len()).map(|p| e[j][p] - e[j - 1][p / l]).collect()
            })
            .collect()
    }

    /// Copy with conditional `j` replaced.
    pub fn with_cond(&self, j: usize, cond: Vec<f64>) -> TargetLaw {
        let mut q = self.clone();
        q.conds[j - 1] = cond;
        q
    }
}

/// Joint law of `(Z, S)` on a finite grid together with the fusion spec and
/// known conditionals for irrelevant coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub grid: Grid,
    pub spec: FusionSpec,
    pub pmf: Vec<f64>,
    /// Known `Q_j` for selected irrelevant coordinates (e.g. randomization).
    #[serde(default)]
    pub fixed: BTreeMap<usize, Vec<f64>>,
}

/// Sequential factorization of a joint law of `(Z, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub p_s: Vec<f64>,
    /// `conds[j−1][p·k + s−1]` = `P_j(z_j | z̄_{j−1}, s)`.
    pub conds: Vec<Vec<f64>>,
}

impl DiscreteModel {
    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn nz(&self) -> usize {
        self.grid.len()
    }

    pub fn from_factors(grid: Grid, spec: FusionSpec, f: &Factors, fixed: BTreeMap<usize, Vec<f64>>) -> Self {
        let k = spec.k;
        let d = grid.d();
        let mut cur: Vec<f64> = f.p_s.clone();
        for j in 1..=d {
            let l = grid.size(j);
            let c = &f.conds[j - 1];
            let mut next = vec![0.0; cur.len() * l];
            for h in 0..grid.prefix_len(j - 1) {
                for z in 0..l {
                    let p = h * l + z;
                    for s in 0..k {
                        next[p * k + s] = cur[h * k + s] * c[p * k + s];
                    }
                }
            }
            cur = next;
        }
        DiscreteModel { grid, spec, pmf: cur, fixed }
    }

    /// `P(S = s)` for `s = 1..=k`.
    pub fn source_marginal(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        for (i, &p) in self.pmf.iter().enumerate() {
            out[i % k] += p;
        }
        out
    }

    pub fn set_prob(&self, set: &BTreeSet<usize>) -> f64 {
        let ps = self.source_marginal();
        set.iter().map(|&s| ps[s - 1]).sum()
    }

    /// `P(S ∈ S_j)`.
    pub fn source_prob(&self, j: usize) -> Result<f64> {
        Ok(self.set_prob(self.spec.fusion_set(j)?))
    }

    /// `P(z̄_j, S = s)` over prefix `j` × sources.
    pub fn prefix_by_source(&self, j: usize) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; self.grid.prefix_len(j) * k];
        for zi in 0..self.nz() {
            let p = self.grid.prefix_of(zi, j);
            for s in 0..k {
                out[p * k + s] += self.pmf[zi * k + s];
            }
        }
        out
    }

    /// `P(z̄_j, S ∈ set)`.
    pub fn prefix_pool(&self, j: usize, set: &BTreeSet<usize>) -> Vec<f64> {
        let k = self.k();
        let by = self.prefix_by_source(j);
        (0..self.grid.prefix_len(j)).map(|p| set.iter().map(|&s| by[p * k + s - 1]).sum()).collect()
    }

    /// `P(z_j | z̄_{j−1}, S ∈ set)` over prefix `j`, uniform off support.
    pub fn pooled_conditional(&self, j: usize, set: &BTreeSet<usize>) -> Vec<f64> {
        normalize_conditional(&self.grid, j, &self.prefix_pool(j, set))
    }

    pub fn all_sources(&self) -> BTreeSet<usize> {
        (1..=self.k()).collect()
    }

    /// `θ(P)`: pooled aligned conditionals for relevant coordinates; known
    /// conditionals (or the all-source pool) for irrelevant ones.
    pub fn theta(&self) -> Result<TargetLaw> {
        let mut conds = Vec::with_capacity(self.grid.d());
        for j in 1..=self.grid.d() {
            let c = if self.spec.is_relevant(j) {
                self.pooled_conditional(j, self.spec.fusion_set(j)?)
            } else if let Some(f) = self.fixed.get(&j) {
                f.clone()
            } else {
                self.pooled_conditional(j, &self.all_sources())
            };
            conds.push(c);
        }
        Ok(TargetLaw::new(self.grid.clone(), conds))
    }

    /// Sequential factorization; conditionals are uniform off support.
    pub fn factors(&self) -> Factors {
        let k = self.k();
        let p_s = self.source_marginal();
        let mut conds = Vec::with_capacity(self.grid.d());
        let mut prev = p_s.clone();
        for j in 1..=self.grid.d() {
            let cur = self.prefix_by_source(j);
            let l = self.grid.size(j);
            let mut c = vec![0.0; cur.len()];
            for h in 0..self.grid.prefix_len(j - 1) {
                for s in 0..k {
                    let den = prev[h * k + s];
                    for z in 0..l {
                        let p = h * l + z;
                        c[p * k + s] = if den > 0.0 { cur[p * k + s] / den } else { 1.0 / l as f64 };
                    }
                }
            }
            conds.push(c);
            prev = cur;
        }
        Factors { p_s, conds }
    }

    /// Largest disagreement between aligned conditionals across sources in
    /// each fusion set, over histories with positive mass.
    pub fn alignment_deviation(&self) -> Result<f64> {
        let k = self.k();
        let f = self.factors();
        let mut worst: f64 = 0.0;
        for &j in &self.spec.relevant {
            let set = self.spec.fusion_set(j)?;
            let prev = self.prefix_by_source(j - 1);
            let l = self.grid.size(j);
            for h in 0..self.grid.prefix_len(j - 1) {
                let live: Vec<usize> = set.iter().copied().filter(|&s| prev[h * k + s - 1] > 0.0).collect();
                for w in live.windows(2) {
                    for z in 0..l {
                        let p = h * l + z;
                        let a = f.conds[j - 1][p * k + w[0] - 1];
                        let b = f.conds[j - 1][p * k + w[1] - 1];
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.pmf.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        let m = self.expect(f);
        self.pmf.iter().zip(f).map(|(p, v)| p * (v - m) * (v - m)).sum()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.pmf.iter().zip(f.iter().zip(g)).map(|(p, (a, b))| p * a * b).sum()
    }

    /// `E[f | z̄_j, s]` for `j = 0..=d`, over prefix × sources, via backward
    /// recursion through the source-specific conditionals.
    pub fn cond_exp_source_all(&self, f: &[f64]) -> Vec<Vec<f64>> {
        let k = self.k();
        let d = self.grid.d();
        let fac = self.factors();
        let mut out = vec![Vec::new(); d + 1];
        out[d] = f.to_vec();
        for j in (1..=d).rev() {
            let l = self.grid.size(j);
            let c = &fac.conds[j - 1];
            let cur = &out[j];
            let mut prev = vec![0.0; self.grid.prefix_len(j - 1) * k];
            for h in 0..self.grid.prefix_len(j - 1) {
                for z in 0..l {
                    let p = h * l + z;
                    for s in 0..k {
                        prev[h * k + s] += c[p * k + s] * cur[p * k + s];
                    }
                }
            }
            out[j - 1] = prev;
        }
        out
    }

    /// `E[f | z̄_j, S ∈ set]` over prefix `j`; zero where the pool has no mass.
    pub fn cond_exp_pool(&self, f: &[f64], j: usize, set: &BTreeSet<usize>) -> Vec<f64> {
        let k = self.k();
        let mut num = vec![0.0; self.grid.prefix_len(j)];
        let mut den = vec![0.0; self.grid.prefix_len(j)];
        for zi in 0..self.nz() {
            let p = self.grid.prefix_of(zi, j);
            for &s in set {
                let w = self.pmf[zi * k + s - 1];
                num[p] += w * f[zi * k + s - 1];
                den[p] += w;
            }
        }
        num.iter().zip(&den).map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 }).collect()
    }

    /// Support indicator of `z̄_{j−1}` under `q`.
    pub fn support(&self, j: usize, q: &TargetLaw) -> Vec<bool> {
        q.prefix_pmf(j - 1).iter().map(|&v| v > 0.0).collect()
    }

    /// `λ_{j−1}(z̄_{j−1}) = dQ̄(z̄_{j−1}) / dP(z̄_{j−1} | S ∈ S_j)`; zero off the
    /// target support.
    pub fn lambda(&self, j: usize, q: &TargetLaw) -> Result<Vec<f64>> {
        let set = self.spec.fusion_set(j)?;
        let pj = self.set_prob(set);
        let num = q.prefix_pmf(j - 1);
        let den = self.prefix_pool(j - 1, set);
        let mut out = Vec::with_capacity(num.len());
        for (h, (&a, &b)) in num.iter().zip(&den).enumerate() {
            if a <= 0.0 {
                out.push(0.0);
            } else if b <= 0.0 {
                return Err(FusionError::Numerical(format!(
                    "strong overlap fails at j={j}, history {h}: target mass with no pooled mass"
                )));
            } else {
                out.push(a * pj / b);
            }
        }
        Ok(out)
    }

    /// Lifts a function of `z` to a function of `(z, s)` constant in `s`.
    pub fn broadcast(&self, f: &[f64]) -> ObsFn {
        let k = self.k();
        (0..self.nz() * k).map(|i| f[i / k]).collect()
    }

    pub fn check_pmf(&self) -> Result<()> {
        if self.pmf.len() != self.nz() * self.k() {
            return Err(FusionError::Config("pmf length does not match grid and k".into()));
        }
        if self.pmf.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(FusionError::Config("pmf has negative or non-finite entries".into()));
        }
        let tot: f64 = self.pmf.iter().sum();
        if (tot - 1.0).abs() > 1e-12 {
            return Err(FusionError::Config(format!("pmf sums to {tot}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DiscreteModel = serde_json::from_str(text)?;
        m.check_pmf()?;
        Ok(m)
    }
}
