//! Projections onto the tangent space of one conditional `Q_j` for each model
//! class, on a finite reference measure of `z̄_j`.

use crate::data::ModelClass;
use crate::discrete::{Grid, PrefixFn};
use crate::error::{FusionError, Result};
use crate::stats::pinv;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Default floor on the location information in the symmetric class.
pub const INFO_FLOOR: f64 = 1e-10;

/// Reference measure of `z̄_j` (a joint pmf over the prefix table at `j`).
/// Its conditional of `z_j` given the history is the conditional projected
/// against; its history marginal weights non-local projections.
#[derive(Clone, Debug)]
pub struct Reference<'a> {
    pub grid: &'a Grid,
    pub j: usize,
    pub pmf: Vec<f64>,
}

impl<'a> Reference<'a> {
    pub fn new(grid: &'a Grid, j: usize, pmf: Vec<f64>) -> Self {
        assert_eq!(pmf.len(), grid.prefix_len(j));
        Reference { grid, j, pmf }
    }

    fn l(&self) -> usize {
        self.grid.size(self.j)
    }

    fn histories(&self) -> usize {
        self.grid.prefix_len(self.j - 1)
    }

    pub fn history_mass(&self, h: usize) -> f64 {
        let l = self.l();
        self.pmf[h * l..(h + 1) * l].iter().sum()
    }

    /// `q(z | h)`, zero where the history has no mass.
    pub fn conditional(&self, h: usize) -> Vec<f64> {
        let l = self.l();
        let m = self.history_mass(h);
        (0..l).map(|z| if m > 0.0 { self.pmf[h * l + z] / m } else { 0.0 }).collect()
    }

    /// `E[f | h]` under the reference conditional.
    pub fn cond_mean(&self, f: &[f64], h: usize) -> f64 {
        let l = self.l();
        self.conditional(h).iter().enumerate().map(|(z, q)| q * f[h * l + z]).sum()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.pmf.iter().zip(f.iter().zip(g)).map(|(p, (a, b))| p * a * b).sum()
    }

    /// `f − E[f | z̄_{j−1}]` (zero on null histories).
    pub fn center(&self, f: &[f64]) -> Vec<f64> {
        let l = self.l();
        let mut out = vec![0.0; f.len()];
        for h in 0..self.histories() {
            if self.history_mass(h) <= 0.0 {
                continue;
            }
            let m = self.cond_mean(f, h);
            for z in 0..l {
                out[h * l + z] = f[h * l + z] - m;
            }
        }
        out
    }
}

/// Projection of a coordinate function `f(z̄_j) ∈ L²₀(Q_j)` onto the tangent
/// space of the class at the reference.
pub fn project(f: &[f64], class: &ModelClass, r: &Reference) -> Result<PrefixFn> {
    Ok(project_with_info(f, class, r)?.0)
}

/// As [`project`], also returning the number of histories at which the
/// symmetric-class information hit the floor.
pub fn project_with_info(f: &[f64], class: &ModelClass, r: &Reference) -> Result<(PrefixFn, usize)> {
    let l = r.l();
    match class {
        ModelClass::Nonparametric => Ok((f.to_vec(), 0)),
        ModelClass::ConditionalMoment { intercept, slopes } => {
            let g0 = moment_table(r, *intercept, slopes);
            let mut out = f.to_vec();
            for h in 0..r.histories() {
                let q = r.conditional(h);
                let fg: f64 = (0..l).map(|z| q[z] * f[h * l + z] * g0[h * l + z]).sum();
                let gg: f64 = (0..l).map(|z| q[z] * g0[h * l + z] * g0[h * l + z]).sum();
                if gg > 0.0 {
                    for z in 0..l {
                        out[h * l + z] -= fg / gg * g0[h * l + z];
                    }
                }
            }
            Ok((out, 0))
        }
        ModelClass::RepeatedMeasures { r: reps } => {
            let perms = level_permutations(r.grid, r.j, *reps)?;
            let mut out = vec![0.0; f.len()];
            let n = perms.len() as f64;
            for h in 0..r.histories() {
                for z in 0..l {
                    let s: f64 = perms.iter().map(|p| f[h * l + p[z]]).sum();
                    out[h * l + z] = s / n;
                }
            }
            Ok((out, 0))
        }
        ModelClass::DagParents { parents } => {
            let keys = dag_keys(r, parents);
            let mut num: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();
            let mut den: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();
            let mut pnum: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            let mut pden: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            for p in 0..f.len() {
                let (pa, z) = (&keys[p / l], p % l);
                *num.entry((pa.clone(), z)).or_default() += r.pmf[p] * f[p];
                *den.entry((pa.clone(), z)).or_default() += r.pmf[p];
                *pnum.entry(pa.clone()).or_default() += r.pmf[p] * f[p];
                *pden.entry(pa.clone()).or_default() += r.pmf[p];
            }
            let out = (0..f.len())
                .map(|p| {
                    let (pa, z) = (&keys[p / l], p % l);
                    let d1 = den[&(pa.clone(), z)];
                    let d0 = pden[pa];
                    let a = if d1 > 0.0 { num[&(pa.clone(), z)] / d1 } else { 0.0 };
                    let b = if d0 > 0.0 { pnum[pa] / d0 } else { 0.0 };
                    a - b
                })
                .collect();
            Ok((out, 0))
        }
        ModelClass::Symmetric => {
            let sym = SymmetricTables::new(r)?;
            let mut out = vec![0.0; f.len()];
            let mut floored = 0;
            for h in 0..r.histories() {
                let q = r.conditional(h);
                let fl: f64 = (0..l).map(|z| q[z] * f[h * l + z] * sym.score[h * l + z]).sum();
                let mut info: f64 = (0..l).map(|z| q[z] * sym.score[h * l + z].powi(2)).sum();
                if info < INFO_FLOOR {
                    if r.history_mass(h) > 0.0 {
                        floored += 1;
                    }
                    info = INFO_FLOOR;
                }
                for z in 0..l {
                    if q[z] <= 0.0 {
                        continue;
                    }
                    let refl = sym.reflect[h * l + z].expect("reflection exists on the support");
                    let even = 0.5 * (f[h * l + z] + f[h * l + refl]);
                    out[h * l + z] = fl / info * sym.score[h * l + z] + even;
                }
            }
            Ok((out, floored))
        }
        ModelClass::Parametric { score } => {
            let c = score.dim;
            if score.values.len() != f.len() {
                return Err(FusionError::Config("score table does not match the prefix table".into()));
            }
            let mut gram = DMatrix::<f64>::zeros(c, c);
            let mut rhs = DVector::<f64>::zeros(c);
            for (p, lv) in score.values.iter().enumerate() {
                let w = r.pmf[p];
                if w == 0.0 {
                    continue;
                }
                for a in 0..c {
                    rhs[a] += w * lv[a] * f[p];
                    for b in 0..c {
                        gram[(a, b)] += w * lv[a] * lv[b];
                    }
                }
            }
            let m = solve_score_gram(&gram, &rhs)?;
            let out = score.values.iter().map(|lv| (0..c).map(|a| m[a] * lv[a]).sum()).collect();
            Ok((out, 0))
        }
    }
}

/// Solves `E[ℓℓᵀ] m = E[ℓ f]`, naming the degenerate score components when
/// the Gram matrix is singular.
pub fn solve_score_gram(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let c = gram.nrows();
    let eig = gram.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let (imin, vmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if top <= 0.0 || vmin <= top * 1e-12 * c as f64 {
        let v = eig.eigenvectors.column(imin);
        let names: Vec<String> =
            (0..c).filter(|&a| v[a].abs() > 0.1).map(|a| format!("ℓ{}", a + 1)).collect();
        return Err(FusionError::Numerical(format!(
            "singular score information; degenerate components: {}",
            names.join(", ")
        )));
    }
    Ok(gram.clone().cholesky().expect("positive definite").solve(rhs))
}

/// Table of the linear moment `g₀` over the prefix at `j`.
fn moment_table(r: &Reference, intercept: f64, slopes: &[f64]) -> Vec<f64> {
    (0..r.pmf.len())
        .map(|p| {
            let z = r.grid.value(p, r.j, r.j);
            let hist = r.grid.values(r.grid.parent(p, r.j), r.j - 1);
            let lin: f64 = slopes.iter().zip(&hist).map(|(a, b)| a * b).sum();
            z - intercept - lin
        })
        .collect()
}

/// Parent-level key of every history at `j`.
fn dag_keys(r: &Reference, parents: &[usize]) -> Vec<Vec<usize>> {
    (0..r.histories())
        .map(|h| {
            let lv = r.grid.decode(h, r.j - 1);
            parents.iter().map(|&m| lv[m - 1]).collect()
        })
        .collect()
}

/// Level maps induced by permuting the `r` components of coordinate `j`.
/// All `r!` permutations for `r ≤ 6`, otherwise 720 sampled ones.
pub fn level_permutations(grid: &Grid, j: usize, r: usize) -> Result<Vec<Vec<usize>>> {
    let levels = &grid.levels[j - 1];
    if levels.iter().any(|v| v.len() != r) {
        return Err(FusionError::Config(format!("coordinate {j} levels do not have {r} components")));
    }
    let perms: Vec<Vec<usize>> = if r <= 6 {
        all_permutations(r)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut base: Vec<usize> = (0..r).collect();
        (0..720)
            .map(|_| {
                base.shuffle(&mut rng);
                base.clone()
            })
            .collect()
    };
    let index: BTreeMap<Vec<u64>, usize> =
        levels.iter().enumerate().map(|(i, v)| (v.iter().map(|x| x.to_bits()).collect(), i)).collect();
    let mut out = Vec::with_capacity(perms.len());
    for perm in perms {
        let mut map = Vec::with_capacity(levels.len());
        for v in levels {
            let pv: Vec<u64> = perm.iter().map(|&i| v[i].to_bits()).collect();
            let target = index.get(&pv).ok_or_else(|| {
                FusionError::Config(format!("coordinate {j} level set is not closed under permutation"))
            })?;
            map.push(*target);
        }
        out.push(map);
    }
    Ok(out)
}

fn all_permutations(r: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; r], &mut out);
    out
}

/// Center, reflection map and lattice location score for the symmetric class.
pub struct SymmetricTables {
    pub center: Vec<f64>,
    pub reflect: Vec<Option<usize>>,
    pub score: Vec<f64>,
}

impl SymmetricTables {
    pub fn new(r: &Reference) -> Result<Self> {
        let l = r.l();
        let vals: Vec<f64> = r.grid.levels[r.j - 1].iter().map(|v| v[0]).collect();
        let step = if l > 1 { vals[1] - vals[0] } else { 1.0 };
        if vals.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0)) {
            return Err(FusionError::Config("symmetric class needs equally spaced levels".into()));
        }
        let find = |v: f64| vals.iter().position(|&x| (x - v).abs() <= 1e-9 * (1.0 + v.abs()));
        let mut center = vec![0.0; r.histories()];
        let mut reflect = vec![None; r.pmf.len()];
        let mut score = vec![0.0; r.pmf.len()];
        for h in 0..r.histories() {
            let q = r.conditional(h);
            let g: f64 = (0..l).map(|z| q[z] * vals[z]).sum();
            center[h] = g;
            for z in 0..l {
                reflect[h * l + z] = find(2.0 * g - vals[z]);
                if q[z] > 0.0 {
                    let up = if z + 1 < l { q[z + 1] } else { 0.0 };
                    let dn = if z > 0 { q[z - 1] } else { 0.0 };
                    score[h * l + z] = (up - dn) / (2.0 * step * q[z]);
                }
            }
        }
        Ok(SymmetricTables { center, reflect, score })
    }
}

/// Spanning set of the tangent space of the class at the reference, built
/// directly from its definition (independent of [`project`]).
pub fn basis(class: &ModelClass, r: &Reference) -> Result<Vec<PrefixFn>> {
    let l = r.l();
    let n = r.pmf.len();
    let live: Vec<usize> = (0..r.histories()).filter(|&h| r.history_mass(h) > 0.0).collect();
    let centered_indicator = |h: usize, members: &[usize]| {
        let q = r.conditional(h);
        let mass: f64 = members.iter().map(|&z| q[z]).sum();
        let mut v = vec![0.0; n];
        for z in 0..l {
            v[h * l + z] = if members.contains(&z) { 1.0 - mass } else { -mass };
        }
        v
    };
    let mut out = Vec::new();
    match class {
        ModelClass::Nonparametric => {
            for &h in &live {
                for z in 0..l.saturating_sub(1) {
                    out.push(centered_indicator(h, &[z]));
                }
            }
        }
        ModelClass::ConditionalMoment { intercept, slopes } => {
            let g0 = moment_table(r, *intercept, slopes);
            for &h in &live {
                let q = r.conditional(h);
                let gg: f64 = (0..l).map(|z| q[z] * g0[h * l + z].powi(2)).sum();
                for z in 0..l {
                    let mut v = centered_indicator(h, &[z]);
                    if gg > 0.0 {
                        let vg: f64 = (0..l).map(|t| q[t] * v[h * l + t] * g0[h * l + t]).sum();
                        for t in 0..l {
                            v[h * l + t] -= vg / gg * g0[h * l + t];
                        }
                    }
                    out.push(v);
                }
            }
        }
        ModelClass::RepeatedMeasures { r: reps } => {
            let perms = level_permutations(r.grid, r.j, *reps)?;
            let orbits = orbits_of(l, &perms);
            for &h in &live {
                for orb in &orbits {
                    out.push(centered_indicator(h, orb));
                }
            }
        }
        ModelClass::DagParents { parents } => {
            let keys = dag_keys(r, parents);
            let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
            for &h in &live {
                groups.entry(keys[h].clone()).or_default().push(h);
            }
            for hs in groups.values() {
                let mass: f64 = hs.iter().map(|&h| r.history_mass(h)).sum();
                let mut qpa = vec![0.0; l];
                for &h in hs {
                    for z in 0..l {
                        qpa[z] += r.pmf[h * l + z] / mass;
                    }
                }
                for z in 0..l {
                    let mut v = vec![0.0; n];
                    for &h in hs {
                        for t in 0..l {
                            v[h * l + t] = if t == z { 1.0 - qpa[z] } else { -qpa[z] };
                        }
                    }
                    out.push(v);
                }
            }
        }
        ModelClass::Symmetric => {
            let sym = SymmetricTables::new(r)?;
            for &h in &live {
                let q = r.conditional(h);
                let mut t1 = vec![0.0; n];
                for z in 0..l {
                    t1[h * l + z] = sym.score[h * l + z];
                }
                out.push(t1);
                for z in 0..l {
                    if q[z] <= 0.0 {
                        continue;
                    }
                    let refl = sym.reflect[h * l + z].expect("reflection exists on the support");
                    if refl >= z {
                        let members = if refl == z { vec![z] } else { vec![z, refl] };
                        out.push(centered_indicator(h, &members));
                    }
                }
            }
        }
        ModelClass::Parametric { score } => {
            for a in 0..score.dim {
                out.push(score.values.iter().map(|v| v[a]).collect());
            }
        }
    }
    Ok(out)
}

fn orbits_of(l: usize, perms: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; l];
    let mut out = Vec::new();
    for z in 0..l {
        if seen[z] {
            continue;
        }
        let mut orb: Vec<usize> = perms.iter().map(|p| p[z]).collect();
        orb.sort_unstable();
        orb.dedup();
        for &t in &orb {
            seen[t] = true;
        }
        out.push(orb);
    }
    out
}

/// Least-squares projection of `f` onto the span of `basis` under the
/// reference measure (normal equations with a pseudo-inverse).
pub fn least_squares_projection(f: &[f64], basis: &[PrefixFn], r: &Reference) -> PrefixFn {
    let m = basis.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for a in 0..m {
        rhs[a] = r.inner(&basis[a], f);
        for b in a..m {
            let v = r.inner(&basis[a], &basis[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let coef = pinv(&gram) * rhs;
    (0..f.len()).map(|p| (0..m).map(|a| coef[a] * basis[a][p]).sum()).collect()
}
