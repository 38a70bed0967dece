//! Gradient calculus for fused models on the discrete substrate: coordinate
//! decomposition, lifting to the observed-data model, the `Γ_j` operator,
//! the fused tangent-space projection, the canonical gradient, and a
//! brute-force pathwise-derivative oracle.

use crate::data::ModelClass;
use crate::discrete::{DiscreteModel, Factors, ObsFn, PrefixFn, TargetLaw};
use crate::error::{FusionError, Result};
use crate::numdiff::extrapolate_even;
use crate::tangent::{self, Reference};
use rand::Rng;
use rand_distr::StandardNormal;

/// Per-coordinate pieces `D_{Q,j}(z̄_j)` of a `b`-dimensional Q-gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientComponents {
    pub b: usize,
    /// `comps[j−1][c]` is component `c` of `D_{Q,j}` over the prefix at `j`.
    pub comps: Vec<Vec<PrefixFn>>,
}

impl GradientComponents {
    pub fn d(&self) -> usize {
        self.comps.len()
    }

    /// Copy with the term at `j` set to zero (negative controls).
    pub fn without(&self, j: usize) -> Self {
        let mut out = self.clone();
        for c in &mut out.comps[j - 1] {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

/// Which measure of `z̄_j` weights the projection of `r_j` onto `T(Q, Q_j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMeasure {
    /// `P(z̄_j | S ∈ S_j)` restricted to the target support. This is the
    /// `L²(P)` projection and is the default.
    Pooled,
    /// The target marginal `Q̄(z̄_j)`. Agrees with `Pooled` for classes whose
    /// tangent space is closed under multiplication by functions of the
    /// history; kept for comparison.
    Target,
}

/// Splits `D_Q` (each component a function of `z`) into `E[D|z̄_j] − E[D|z̄_{j−1}]`.
pub fn decompose(d_q: &[Vec<f64>], q: &TargetLaw) -> GradientComponents {
    let b = d_q.len();
    let per: Vec<Vec<PrefixFn>> = d_q.iter().map(|f| q.decompose(f)).collect();
    let comps = (0..q.d()).map(|j| (0..b).map(|c| per[c][j].clone()).collect()).collect();
    GradientComponents { b, comps }
}

/// Sums the components back into a function of `z`.
pub fn reconstruct(gc: &GradientComponents, q: &TargetLaw) -> Vec<Vec<f64>> {
    let g = &q.grid;
    (0..gc.b)
        .map(|c| (0..g.len()).map(|zi| (1..=gc.d()).map(|j| gc.comps[j - 1][c][g.prefix_of(zi, j)]).sum()).collect())
        .collect()
}

/// Gradient of `φ` in the fused model: `Σ_{j∈J} 1(s∈S_j)/P(S∈S_j) λ_{j−1} D_{Q,j}`.
pub fn lift(gc: &GradientComponents, model: &DiscreteModel, q: &TargetLaw) -> Result<Vec<ObsFn>> {
    let g = &model.grid;
    let k = model.k();
    let mut out = vec![vec![0.0; model.nz() * k]; gc.b];
    for &j in &model.spec.relevant {
        let set = model.spec.fusion_set(j)?;
        let pj = model.set_prob(set);
        let lam = model.lambda(j, q)?;
        for zi in 0..model.nz() {
            let p = g.prefix_of(zi, j);
            let h = g.prefix_of(zi, j - 1);
            for &s in set {
                for c in 0..gc.b {
                    out[c][zi * k + s - 1] += lam[h] / pj * gc.comps[j - 1][c][p];
                }
            }
        }
    }
    Ok(out)
}

/// `Γ_j(f) = 1_supp {E[f | z̄_j, S∈S_j] − E[f | z̄_{j−1}, S∈S_j]}`.
pub fn gamma_j(f: &[f64], j: usize, model: &DiscreteModel, q: &TargetLaw) -> Result<PrefixFn> {
    let set = model.spec.fusion_set(j)?;
    let e1 = model.cond_exp_pool(f, j, set);
    let e0 = model.cond_exp_pool(f, j - 1, set);
    let supp = model.support(j, q);
    let l = model.grid.size(j);
    Ok((0..e1.len()).map(|p| if supp[p / l] { e1[p] - e0[p / l] } else { 0.0 }).collect())
}

/// `Γ_j` in its unsimplified form
/// `E[E[f|Z̄_j,S] − E[f|Z̄_{j−1},S] | z̄_j, S∈S_j]` (support-masked).
pub fn gamma_j_unsimplified(f: &[f64], j: usize, model: &DiscreteModel, q: &TargetLaw) -> Result<PrefixFn> {
    let set = model.spec.fusion_set(j)?;
    let k = model.k();
    let l = model.grid.size(j);
    let e = model.cond_exp_source_all(f);
    let mass = model.prefix_by_source(j);
    let supp = model.support(j, q);
    let mut out = vec![0.0; model.grid.prefix_len(j)];
    for (p, o) in out.iter_mut().enumerate() {
        if !supp[p / l] {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &s in set {
            let w = mass[p * k + s - 1];
            num += w * (e[j][p * k + s - 1] - e[j - 1][(p / l) * k + s - 1]);
            den += w;
        }
        *o = if den > 0.0 { num / den } else { 0.0 };
    }
    Ok(out)
}

fn reference_pmf(j: usize, model: &DiscreteModel, q: &TargetLaw, measure: ProjectionMeasure) -> Result<Vec<f64>> {
    Ok(match measure {
        ProjectionMeasure::Target => q.prefix_pmf(j),
        ProjectionMeasure::Pooled => {
            let supp = model.support(j, q);
            let l = model.grid.size(j);
            let mut pool = model.prefix_pool(j, model.spec.fusion_set(j)?);
            for (p, v) in pool.iter_mut().enumerate() {
                if !supp[p / l] {
                    *v = 0.0;
                }
            }
            pool
        }
    })
}

/// Projection of `Γ_j`-type coordinate functions onto `T(Q, Q_j)`.
pub fn project_coordinate(
    f: &[f64],
    j: usize,
    model: &DiscreteModel,
    q: &TargetLaw,
    measure: ProjectionMeasure,
) -> Result<PrefixFn> {
    let class = model.spec.class(j);
    if class.is_nonparametric() {
        return Ok(f.to_vec());
    }
    let r = Reference::new(&model.grid, j, reference_pmf(j, model, q, measure)?);
    tangent::project(f, &class, &r)
}

/// `L²₀(P)` projection of `f` onto the tangent space of the fused model.
pub fn project_fused(f: &[f64], model: &DiscreteModel, q: &TargetLaw, measure: ProjectionMeasure) -> Result<ObsFn> {
    let k = model.k();
    let g = &model.grid;
    let mean = model.expect(f);
    let mut out: Vec<f64> = f.iter().map(|v| v - mean).collect();
    let e = model.cond_exp_source_all(f);
    for &j in &model.spec.relevant {
        let set = model.spec.fusion_set(j)?;
        let gam = gamma_j(f, j, model, q)?;
        let proj = project_coordinate(&gam, j, model, q, measure)?;
        let supp = model.support(j, q);
        for zi in 0..model.nz() {
            let p = g.prefix_of(zi, j);
            let h = g.prefix_of(zi, j - 1);
            if !supp[h] {
                continue;
            }
            for &s in set {
                let local = e[j][p * k + s - 1] - e[j - 1][h * k + s - 1];
                out[zi * k + s - 1] += proj[p] - local;
            }
        }
    }
    Ok(out)
}

/// Projected coordinate terms `Π{r_j | T(Q, Q_j)}` with `r_j = λ_{j−1} D_{Q,j}`,
/// masked by the target support; zero for irrelevant coordinates.
pub fn projected_terms(
    gc: &GradientComponents,
    model: &DiscreteModel,
    q: &TargetLaw,
    measure: ProjectionMeasure,
) -> Result<Vec<Vec<PrefixFn>>> {
    let g = &model.grid;
    let mut out = Vec::with_capacity(g.d());
    for j in 1..=g.d() {
        if !model.spec.is_relevant(j) {
            out.push(vec![vec![0.0; g.prefix_len(j)]; gc.b]);
            continue;
        }
        let lam = model.lambda(j, q)?;
        let supp = model.support(j, q);
        let l = g.size(j);
        let mut terms = Vec::with_capacity(gc.b);
        for c in 0..gc.b {
            let r: Vec<f64> = (0..g.prefix_len(j)).map(|p| lam[p / l] * gc.comps[j - 1][c][p]).collect();
            let mut pr = project_coordinate(&r, j, model, q, measure)?;
            for (p, v) in pr.iter_mut().enumerate() {
                if !supp[p / l] {
                    *v = 0.0;
                }
            }
            terms.push(pr);
        }
        out.push(terms);
    }
    Ok(out)
}

/// Canonical gradient `Σ_j 1_supp 1(s∈S_j)/P(S∈S_j) Π{r_j | T}(z̄_j)`.
pub fn canonical(
    gc: &GradientComponents,
    model: &DiscreteModel,
    q: &TargetLaw,
    measure: ProjectionMeasure,
) -> Result<Vec<ObsFn>> {
    let terms = projected_terms(gc, model, q, measure)?;
    let g = &model.grid;
    let k = model.k();
    let mut out = vec![vec![0.0; model.nz() * k]; gc.b];
    for &j in &model.spec.relevant {
        let set = model.spec.fusion_set(j)?;
        let pj = model.set_prob(set);
        for zi in 0..model.nz() {
            let p = g.prefix_of(zi, j);
            for &s in set {
                for c in 0..gc.b {
                    out[c][zi * k + s - 1] += terms[j - 1][c][p] / pj;
                }
            }
        }
    }
    Ok(out)
}

/// Compares the canonical gradient with its augmented inverse-probability
/// weighted complete-case form under nested fusion sets. Returns the largest
/// pointwise deviation.
pub fn nested_fusion_identity_check(gc: &GradientComponents, model: &DiscreteModel, q: &TargetLaw) -> Result<f64> {
    let spec = &model.spec;
    if !spec.is_nested() {
        return Err(FusionError::Precondition("fusion sets are not nested with J = [d]".into()));
    }
    let d = spec.d;
    let k = model.k();
    let g = &model.grid;
    let terms = projected_terms(gc, model, q, ProjectionMeasure::Pooled)?;
    let canon = canonical(gc, model, q, ProjectionMeasure::Pooled)?;
    // P(C ≥ ℓ) = P(S ∈ S_ℓ) under nesting; index 0..=d+1.
    let mut ge = vec![0.0; d + 2];
    ge[0] = 1.0;
    for (l, v) in ge.iter_mut().enumerate().take(d + 1).skip(1) {
        *v = model.source_prob(l)?;
    }
    let mut worst: f64 = 0.0;
    for s in 1..=k {
        let c = (1..=d).filter(|&j| spec.in_fusion_set(j, s)).max().unwrap_or(0);
        for zi in 0..model.nz() {
            for comp in 0..gc.b {
                let partial = |l: usize| -> f64 { (1..=l).map(|j| terms[j - 1][comp][g.prefix_of(zi, j)]).sum() };
                let mut aipw = if c == d { partial(d) / ge[d] } else { 0.0 };
                for l in 1..d {
                    let hazard = (ge[l] - ge[l + 1]) / ge[l];
                    let ind_eq = if c == l { 1.0 } else { 0.0 };
                    let ind_ge = if c >= l { 1.0 } else { 0.0 };
                    aipw += (ind_eq - ind_ge * hazard) / ge[l + 1] * partial(l);
                }
                worst = worst.max((aipw - canon[comp][zi * k + s - 1]).abs());
            }
        }
    }
    Ok(worst)
}

/// Direction of a factorwise perturbation `P(s)(1+εh₀) Π_j P_j(1+εg_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub h0: Vec<f64>,
    /// `g[j−1][p·k + s−1]`, conditionally mean zero under `P_j(·|z̄_{j−1}, s)`.
    pub g: Vec<Vec<f64>>,
}

impl Perturbation {
    /// Score of the joint law, `h₀(s) + Σ_j g_j(z̄_j, s)`.
    pub fn score(&self, model: &DiscreteModel) -> ObsFn {
        let k = model.k();
        let g = &model.grid;
        let mut out = vec![0.0; model.nz() * k];
        for zi in 0..model.nz() {
            for s in 0..k {
                let mut v = self.h0[s];
                for j in 1..=g.d() {
                    v += self.g[j - 1][g.prefix_of(zi, j) * k + s];
                }
                out[zi * k + s] = v;
            }
        }
        out
    }

    /// Perturbed model, or `None` if some factor would turn negative.
    pub fn apply(&self, model: &DiscreteModel, eps: f64, base: &Factors) -> Option<DiscreteModel> {
        let mut f = base.clone();
        for (p, h) in f.p_s.iter_mut().zip(&self.h0) {
            *p *= 1.0 + eps * h;
            if *p < 0.0 {
                return None;
            }
        }
        for (c, g) in f.conds.iter_mut().zip(&self.g) {
            for (v, gv) in c.iter_mut().zip(g) {
                *v *= 1.0 + eps * gv;
                if *v < 0.0 {
                    return None;
                }
            }
        }
        Some(DiscreteModel::from_factors(model.grid.clone(), model.spec.clone(), &f, model.fixed.clone()))
    }

    pub fn scaled(&self, a: f64) -> Perturbation {
        Perturbation {
            h0: self.h0.iter().map(|v| v * a).collect(),
            g: self.g.iter().map(|t| t.iter().map(|v| v * a).collect()).collect(),
        }
    }
}

/// Default step grid for the oracle.
pub const EPS_GRID: [f64; 3] = [1e-3, 5e-4, 1e-4];

/// Richardson-extrapolated derivative of `φ(P_ε)` at `ε = 0`. Steps are halved
/// until every perturbed law is a valid pmf.
pub fn pathwise_derivative(
    model: &DiscreteModel,
    phi: &dyn Fn(&DiscreteModel) -> Result<Vec<f64>>,
    dir: &Perturbation,
    eps_grid: &[f64],
) -> Result<Vec<f64>> {
    let base = model.factors();
    let mut scale = 1.0;
    for _ in 0..60 {
        let eps: Vec<f64> = eps_grid.iter().map(|e| e * scale).collect();
        let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(eps.len());
        let mut ok = true;
        for &e in &eps {
            match (dir.apply(model, e, &base), dir.apply(model, -e, &base)) {
                (Some(mp), Some(mm)) => {
                    let a = phi(&mp)?;
                    let b = phi(&mm)?;
                    diffs.push(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * e)).collect());
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let b = diffs[0].len();
            return Ok((0..b)
                .map(|c| {
                    let y: Vec<f64> = diffs.iter().map(|v| v[c]).collect();
                    extrapolate_even(&eps, &y)
                })
                .collect());
        }
        scale *= 0.5;
    }
    Err(FusionError::Oracle("perturbation leaves the simplex for every step".into()))
}

/// `max_c |dφ_c/dε − E_P[D_c · score]|`.
pub fn oracle_mismatch(
    model: &DiscreteModel,
    phi: &dyn Fn(&DiscreteModel) -> Result<Vec<f64>>,
    grad: &[ObsFn],
    dir: &Perturbation,
    eps_grid: &[f64],
) -> Result<f64> {
    let deriv = pathwise_derivative(model, phi, dir, eps_grid)?;
    let score = dir.score(model);
    Ok(deriv.iter().zip(grad).map(|(dv, dg)| (dv - model.inner(dg, &score)).abs()).fold(0.0, f64::max))
}

fn normalize_max(v: &mut [f64]) {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

/// Random score of the fused model: unrestricted where a source is not
/// aligned (or off the target support), and a random tangent element of the
/// coordinate's model class where it is.
pub fn random_tangent_perturbation<R: Rng>(model: &DiscreteModel, q: &TargetLaw, rng: &mut R) -> Result<Perturbation> {
    let k = model.k();
    let g = &model.grid;
    let fac = model.factors();
    let mut h0: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let m: f64 = h0.iter().zip(&fac.p_s).map(|(a, b)| a * b).sum();
    h0.iter_mut().for_each(|v| *v -= m);
    normalize_max(&mut h0);
    let mut gs = Vec::with_capacity(g.d());
    for j in 1..=g.d() {
        let l = g.size(j);
        let cond = &fac.conds[j - 1];
        let mut gj = vec![0.0; g.prefix_len(j) * k];
        let supp = model.support(j, q);
        let aligned_dir = if model.spec.is_relevant(j) {
            let r = Reference::new(g, j, q.prefix_pmf(j));
            let basis = tangent::basis(&model.spec.class(j), &r)?;
            let mut f = vec![0.0; g.prefix_len(j)];
            for b in &basis {
                let c: f64 = rng.sample(StandardNormal);
                for (fv, bv) in f.iter_mut().zip(b) {
                    *fv += c * bv;
                }
            }
            normalize_max(&mut f);
            Some(f)
        } else {
            None
        };
        for h in 0..g.prefix_len(j - 1) {
            for s in 1..=k {
                let aligned = model.spec.in_fusion_set(j, s) && supp[h];
                if let (true, Some(f)) = (aligned, &aligned_dir) {
                    for z in 0..l {
                        gj[(h * l + z) * k + s - 1] = f[h * l + z];
                    }
                } else {
                    let mut v: Vec<f64> = (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let mean: f64 = (0..l).map(|z| v[z] * cond[(h * l + z) * k + s - 1]).sum();
                    v.iter_mut().for_each(|x| *x -= mean);
                    normalize_max(&mut v);
                    for z in 0..l {
                        gj[(h * l + z) * k + s - 1] = v[z];
                    }
                }
            }
        }
        gs.push(gj);
    }
    Ok(Perturbation { h0, g: gs })
}

/// Factorwise perturbation whose joint score is `f − E f`.
pub fn perturbation_from_score(model: &DiscreteModel, f: &[f64]) -> Perturbation {
    let k = model.k();
    let g = &model.grid;
    let e = model.cond_exp_source_all(f);
    let mean = model.expect(f);
    let h0 = (0..k).map(|s| e[0][s] - mean).collect();
    let gs = (1..=g.d())
        .map(|j| {
            let l = g.size(j);
            (0..g.prefix_len(j) * k)
                .map(|i| {
                    let (p, s) = (i / k, i % k);
                    e[j][i] - e[j - 1][(p / l) * k + s]
                })
                .collect()
        })
        .collect();
    Perturbation { h0, g: gs }
}

/// Random score orthogonal to the fused tangent space.
pub fn orthogonal_perturbation<R: Rng>(model: &DiscreteModel, q: &TargetLaw, rng: &mut R) -> Result<Perturbation> {
    let raw: Vec<f64> = (0..model.nz() * model.k()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let proj = project_fused(&raw, model, q, ProjectionMeasure::Pooled)?;
    let mut perp: Vec<f64> = raw.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let mean = model.expect(&perp);
    perp.iter_mut().for_each(|v| *v -= mean);
    normalize_max(&mut perp);
    Ok(perturbation_from_score(model, &perp))
}

/// Spanning set of the fused tangent space, built from its characterization:
/// free scores for `S`, free conditional scores wherever a source is not
/// aligned, and class tangent elements on aligned sources.
pub fn fused_tangent_basis(model: &DiscreteModel, q: &TargetLaw, measure: ProjectionMeasure) -> Result<Vec<ObsFn>> {
    let k = model.k();
    let g = &model.grid;
    let n = model.nz() * k;
    let fac = model.factors();
    let mass = |j: usize| model.prefix_by_source(j);
    let mut out = Vec::new();
    for s in 0..k.saturating_sub(1) {
        let ps = fac.p_s[s];
        out.push((0..n).map(|i| if i % k == s { 1.0 - ps } else { -ps }).collect());
    }
    for j in 1..=g.d() {
        let l = g.size(j);
        let supp = model.support(j, q);
        let hist_mass = mass(j - 1);
        let cond = &fac.conds[j - 1];
        for h in 0..g.prefix_len(j - 1) {
            for s in 1..=k {
                if hist_mass[h * k + s - 1] <= 0.0 {
                    continue;
                }
                if model.spec.is_relevant(j) && model.spec.in_fusion_set(j, s) && supp[h] {
                    continue;
                }
                for z in 0..l.saturating_sub(1) {
                    let v: Vec<f64> = (0..n)
                        .map(|i| {
                            let (zi, si) = (i / k, i % k + 1);
                            let p = g.prefix_of(zi, j);
                            if si != s || g.parent(p, j) != h {
                                return 0.0;
                            }
                            let ind = if g.last_level(p, j) == z { 1.0 } else { 0.0 };
                            ind - cond[(h * l + z) * k + s - 1]
                        })
                        .collect();
                    out.push(v);
                }
            }
        }
        if model.spec.is_relevant(j) {
            let r = Reference::new(g, j, reference_pmf(j, model, q, measure)?);
            for t in tangent::basis(&model.spec.class(j), &r)? {
                let v: Vec<f64> = (0..n)
                    .map(|i| {
                        let (zi, s) = (i / k, i % k + 1);
                        let h = g.prefix_of(zi, j - 1);
                        if model.spec.in_fusion_set(j, s) && supp[h] {
                            t[g.prefix_of(zi, j)]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// Least-squares projection of `f` onto the span of `basis` in `L²(P)`.
pub fn least_squares_fused(f: &[f64], basis: &[ObsFn], model: &DiscreteModel) -> ObsFn {
    use nalgebra::{DMatrix, DVector};
    let m = basis.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for a in 0..m {
        rhs[a] = model.inner(&basis[a], f);
        for b in a..m {
            let v = model.inner(&basis[a], &basis[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let coef = crate::stats::pinv(&gram) * rhs;
    (0..f.len()).map(|i| (0..m).map(|a| coef[a] * basis[a][i]).sum()).collect()
}

/// True when every relevant coordinate's class is nonparametric.
pub fn all_nonparametric(model: &DiscreteModel) -> bool {
    model.spec.relevant.iter().all(|&j| matches!(model.spec.class(j), ModelClass::Nonparametric))
}
