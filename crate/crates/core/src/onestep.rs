//! Cross-fitted one-step estimation on sampled data: plug-in plus the mean of
//! the estimated gradient, influence-function covariance, Wald intervals and
//! diagnostics.

use crate::data::{Dense, FusedDataset};
use crate::error::{FusionError, Result};
use crate::estimands::{
    kl_logistic, least_squares, newton_root, z_mean, EstimandSpec, LongitudinalModel, Policy, ZFamily, ZFunctional, FLAT_QUANTILE_FLOOR,
    WEAK_ID_FLOOR,
};
use crate::kde::{gauss, Kde};
use crate::longitudinal::{fit_last, score_projection, LastModel, Layout};
use crate::nuisance::{self, fit_all, infer_discrete, NuisanceFit, NuisanceOptions, Requirements};
use crate::plan::{weights_for, SeqFit, SeqPlan};
use crate::stats::z_value;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Grid size for plug-in quantile inversion.
pub const QUANTILE_GRID: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneStepOptions {
    pub nuisance: NuisanceOptions,
    /// Confidence level of the Wald intervals.
    pub level: f64,
}

impl Default for OneStepOptions {
    fn default() -> Self {
        OneStepOptions { nuisance: NuisanceOptions::default(), level: 0.95 }
    }
}

impl OneStepOptions {
    pub fn validate(&self) -> Result<()> {
        self.nuisance.validate()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(FusionError::Config("level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IfCheck {
    /// Weighted column means of the influence-function values.
    pub if_mean: Vec<f64>,
    /// `if_mean` over its standard error.
    pub if_mean_se_ratio: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Clipping {
    pub clipped: usize,
    pub total: usize,
    /// Share of ratio evaluations clipped at the upper bound.
    pub rate: f64,
    /// Evaluations at or below the lower bound, treated as off the target
    /// support and set to zero.
    pub off_support: usize,
    pub off_support_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    /// Per-fold estimates.
    pub fold_estimates: Vec<Vec<f64>>,
    /// Largest minus smallest fold estimate per component.
    pub fold_spread: Vec<f64>,
    /// Plug-in on the training rows plus the gradient mean on the evaluation
    /// rows, minus the estimate, averaged over folds.
    pub remainder_proxy: Option<Vec<f64>>,
    /// Regressions that needed the ridge fallback.
    pub ridge_fits: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub if_check: IfCheck,
    pub clipping: Clipping,
    pub stability: Stability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub model: Option<String>,
    pub n: usize,
    pub folds: usize,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub ci: Vec<Interval>,
    /// Out-of-fold gradient values, one row per record.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub if_values: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn to_json(&self, with_if: bool) -> Result<String> {
        let out = if with_if { self.clone() } else { EstimateReport { if_values: Vec::new(), ..self.clone() } };
        serde_json::to_string_pretty(&out).map_err(|e| FusionError::Config(e.to_string()))
    }

    /// Writes the per-row gradient values as CSV (`row, if_1, …, if_b`).
    pub fn write_if_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let b = self.estimate.len();
        let mut head = vec!["row".to_string()];
        head.extend((1..=b).map(|c| format!("if_{c}")));
        w.write_record(&head).map_err(io_err)?;
        for (i, r) in self.if_values.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(r.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| FusionError::Data(e.to_string()))
    }
}

fn io_err(e: csv::Error) -> FusionError {
    FusionError::Data(e.to_string())
}

fn share(a: usize, total: usize) -> f64 {
    if total > 0 {
        a as f64 / total as f64
    } else {
        0.0
    }
}

/// Componentwise normal intervals `estimate ± z·SE`.
pub fn wald_ci(estimate: &[f64], covariance: &[Vec<f64>], level: f64) -> Vec<Interval> {
    let z = z_value(level);
    estimate
        .iter()
        .enumerate()
        .map(|(c, &e)| {
            let se = covariance[c][c].max(0.0).sqrt();
            Interval { lo: e - z * se, hi: e + z * se, level }
        })
        .collect()
}

/// Per-fold inputs shared by all estimand evaluators.
pub struct FoldCtx<'a> {
    pub ds: &'a FusedDataset,
    pub dense: &'a Dense,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub nf: NuisanceFit,
    /// Row weights per evaluation row, `[row][arm][relevant position]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub opts: &'a OneStepOptions,
}

/// Output of one estimator on one fold.
#[derive(Clone, Debug)]
pub struct FoldEval {
    pub plug: Vec<f64>,
    pub train_plug: Option<Vec<f64>>,
    /// Gradient values on the evaluation rows (same order as `FoldCtx::eval`).
    pub d: Vec<Vec<f64>>,
    pub ridge_fits: usize,
}

struct FoldRun {
    eval: Vec<usize>,
    outs: Vec<FoldEval>,
    clipped: usize,
    total: usize,
    off_support: usize,
    ridge_fits: usize,
}

fn cross_fit<F>(ds: &FusedDataset, req: &Requirements, opts: &OneStepOptions, f: F) -> Result<Vec<FoldRun>>
where
    F: Fn(&FoldCtx) -> Result<Vec<FoldEval>> + Sync,
{
    opts.validate()?;
    if ds.is_empty() {
        return Err(FusionError::Data("empty dataset".into()));
    }
    let dense = ds.dense();
    let discrete = infer_discrete(ds);
    req.check(&ds.spec, &discrete)?;
    let sp = nuisance::source_probs(ds)?;
    let k = opts.nuisance.folds;
    let labels = nuisance::fold_assignment(ds, k, opts.nuisance.fold_seed);
    let runs: Vec<Result<FoldRun>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let eval: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == fold).collect();
            let train: Vec<usize> = if k == 1 { eval.clone() } else { (0..ds.len()).filter(|&i| labels[i] != fold).collect() };
            let nf = fit_all(ds, &dense, &train, req, &opts.nuisance, &sp, &discrete)?;
            let weights = weights_for(&nf, &dense, &eval, &req.arms);
            let ctx = FoldCtx { ds, dense: &dense, train, eval, nf, weights, opts };
            let outs = f(&ctx)?;
            let (clipped, total) = ctx.nf.clips.counts();
            let off_support = ctx.nf.clips.off_support_count();
            Ok(FoldRun { eval: ctx.eval, outs, clipped, total, off_support, ridge_fits: ctx.nf.ridge_fits })
        })
        .collect();
    runs.into_iter().collect()
}

fn assemble(ds: &FusedDataset, runs: &[FoldRun], which: usize, estimand: &str, model: Option<String>, level: f64) -> Result<EstimateReport> {
    let n = ds.len();
    let b = runs[0].outs[which].plug.len();
    let w: Vec<f64> = ds.records.iter().map(|r| r.w).collect();
    let mut if_values = vec![vec![0.0; b]; n];
    let mut fold_estimates = Vec::new();
    let mut est = vec![0.0; b];
    let mut wtot = 0.0;
    let mut rem = Some(vec![0.0; b]);
    let mut ridge = 0;
    let (mut clipped, mut total, mut off_support) = (0, 0, 0);
    let mut bad = Vec::new();
    for run in runs {
        let out = &run.outs[which];
        ridge += out.ridge_fits + run.ridge_fits;
        clipped += run.clipped;
        total += run.total;
        off_support += run.off_support;
        let wf: f64 = run.eval.iter().map(|&i| w[i]).sum();
        let mut mean = vec![0.0; b];
        for (k, &i) in run.eval.iter().enumerate() {
            if out.d[k].iter().any(|v| !v.is_finite()) {
                bad.push(i);
                continue;
            }
            if_values[i].clone_from(&out.d[k]);
            for c in 0..b {
                mean[c] += w[i] * out.d[k][c];
            }
        }
        if !(wf > 0.0) {
            continue;
        }
        let ef: Vec<f64> = (0..b).map(|c| out.plug[c] + mean[c] / wf).collect();
        for c in 0..b {
            est[c] += wf * ef[c];
        }
        wtot += wf;
        rem = match (rem, &out.train_plug) {
            (Some(mut r), Some(tp)) => {
                for c in 0..b {
                    r[c] += tp[c] + mean[c] / wf;
                }
                Some(r)
            }
            _ => None,
        };
        fold_estimates.push(ef);
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        let shown: Vec<String> = bad.iter().take(10).map(|i| i.to_string()).collect();
        return Err(FusionError::Numerical(format!(
            "non-finite influence-function values at {} rows: {}{}",
            bad.len(),
            shown.join(", "),
            if bad.len() > 10 { ", …" } else { "" }
        )));
    }
    if !(wtot > 0.0) {
        return Err(FusionError::Data("total weight is zero".into()));
    }
    for v in est.iter_mut() {
        *v /= wtot;
    }
    let nf = fold_estimates.len() as f64;
    let remainder_proxy = rem.map(|r| (0..b).map(|c| r[c] / nf - est[c]).collect());
    let sw: f64 = w.iter().sum();
    let if_mean: Vec<f64> = (0..b).map(|c| if_values.iter().zip(&w).map(|(d, wi)| wi * d[c]).sum::<f64>() / sw).collect();
    let mut cov = vec![vec![0.0; b]; b];
    for (d, wi) in if_values.iter().zip(&w) {
        for r in 0..b {
            for c in 0..b {
                cov[r][c] += wi * (d[r] - if_mean[r]) * (d[c] - if_mean[c]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= sw * n as f64;
        }
    }
    let se: Vec<f64> = (0..b).map(|c| cov[c][c].max(0.0).sqrt()).collect();
    let ratio = (0..b).map(|c| if se[c] > 0.0 { if_mean[c] / se[c] } else { 0.0 }).collect();
    let spread = (0..b)
        .map(|c| {
            let lo = fold_estimates.iter().map(|e| e[c]).fold(f64::INFINITY, f64::min);
            let hi = fold_estimates.iter().map(|e| e[c]).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        })
        .collect();
    let ci = wald_ci(&est, &cov, level);
    Ok(EstimateReport {
        estimand: estimand.to_string(),
        model,
        n,
        folds: runs.len(),
        estimate: est,
        se,
        covariance: cov,
        ci,
        if_values,
        diagnostics: Diagnostics {
            if_check: IfCheck { if_mean, if_mean_se_ratio: ratio },
            clipping: Clipping { clipped, total, rate: share(clipped, total), off_support, off_support_rate: share(off_support, total) },
            stability: Stability { fold_estimates, fold_spread: spread, remainder_proxy, ridge_fits: ridge },
        },
    })
}

/// Fits the plan's regressions on the training rows and evaluates the
/// gradient terms on the evaluation rows.
struct PlanEval {
    seq: SeqFit,
    values: Vec<f64>,
    train_values: Vec<f64>,
    terms: Vec<Vec<Vec<f64>>>,
}

fn eval_plan(ctx: &FoldCtx, plan: &SeqPlan, tops: Option<Vec<crate::plan::TopFn>>) -> Result<PlanEval> {
    let seq = SeqFit::fit(ctx.dense, &ctx.train, &ctx.ds.spec, plan, &ctx.opts.nuisance.outcome_learner, tops)?;
    let values = seq.arm_values(ctx.dense, &ctx.eval)?;
    let train_values = seq.arm_values(ctx.dense, &ctx.train)?;
    let rel = &ctx.nf.relevant;
    let terms = ctx.eval.par_iter().enumerate().map(|(k, &i)| seq.terms(&ctx.dense.z[i], &ctx.weights[k], &values, rel)).collect();
    Ok(PlanEval { seq, values, train_values, terms })
}

fn plan_fold(ctx: &FoldCtx, plan: &SeqPlan) -> Result<FoldEval> {
    let pe = eval_plan(ctx, plan, None)?;
    Ok(FoldEval {
        plug: vec![pe.seq.contrast(&pe.values)],
        train_plug: Some(vec![pe.seq.contrast(&pe.train_values)]),
        d: pe.terms.iter().map(|t| vec![pe.seq.gradient(t)]).collect(),
        ridge_fits: pe.seq.ridge_fits,
    })
}

pub fn model_name(m: &LongitudinalModel) -> &'static str {
    match m {
        LongitudinalModel::Nonparametric => "nonparametric",
        LongitudinalModel::Symmetric => "symmetric",
        LongitudinalModel::Linear { .. } => "linear",
    }
}

fn longitudinal_fold(ctx: &FoldCtx, lay: Layout, model: &LongitudinalModel) -> Result<FoldEval> {
    let spec = &ctx.ds.spec;
    let o = &ctx.opts.nuisance;
    let last = fit_last(model, lay, ctx.dense, &ctx.train, spec, &o.outcome_learner, &o.score_learner)?;
    let pe = eval_plan(ctx, &lay.plan(), last.tops())?;
    let coefs = &pe.seq.plan.coefs;
    let lp = ctx.nf.relevant.len() - 1;
    let y = lay.y();
    let dense = ctx.dense;
    let np_last = |k: usize| -> f64 { coefs.iter().enumerate().map(|(a, c)| c * pe.terms[k][a][lp]).sum() };
    let head = |k: usize| -> f64 { coefs.iter().enumerate().map(|(a, c)| c * pe.terms[k][a][..lp].iter().sum::<f64>()).sum() };
    let in_last = |i: usize| spec.in_fusion_set(y, dense.s[i]) && dense.observed_through(i, y);
    let d: Vec<f64> = match &last {
        LastModel::Nonparametric => (0..ctx.eval.len()).map(|k| head(k) + np_last(k)).collect(),
        LastModel::Symmetric(sym) => ctx
            .eval
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut t = head(k);
                for (a, c) in coefs.iter().enumerate() {
                    let w = ctx.weights[k][a][lp];
                    if w != 0.0 {
                        t += c * w * sym.projected(a, &dense.z[i], spec);
                    }
                }
                t
            })
            .collect(),
        LastModel::Linear(lin) => {
            let rows: Vec<usize> = (0..ctx.eval.len()).filter(|&k| in_last(ctx.eval[k])).collect();
            let scores: Vec<Vec<f64>> = rows.par_iter().map(|&k| lin.score(&dense.z[ctx.eval[k]])).collect();
            let r: Vec<f64> = rows.iter().map(|&k| np_last(k)).collect();
            let w: Vec<f64> = rows.iter().map(|&k| dense.w[ctx.eval[k]]).collect();
            let m = score_projection(&scores, &r, &w)?;
            let mut d: Vec<f64> = (0..ctx.eval.len()).map(head).collect();
            for (pos, &k) in rows.iter().enumerate() {
                d[k] += scores[pos].iter().zip(&m).map(|(a, b)| a * b).sum::<f64>();
            }
            d
        }
    };
    Ok(FoldEval {
        plug: vec![pe.seq.contrast(&pe.values)],
        train_plug: Some(vec![pe.seq.contrast(&pe.train_values)]),
        d: d.into_iter().map(|v| vec![v]).collect(),
        ridge_fits: pe.seq.ridge_fits,
    })
}

/// Longitudinal effect under several outcome models, sharing the fold split,
/// conditional laws and row weights.
pub fn longitudinal(ds: &FusedDataset, t: usize, models: &[LongitudinalModel], opts: &OneStepOptions) -> Result<Vec<EstimateReport>> {
    if t == 0 || 2 * t - 1 > ds.spec.d {
        return Err(FusionError::Config(format!("t = {t} does not fit d = {}", ds.spec.d)));
    }
    let lay = Layout { t };
    let req = lay.plan().requirements();
    let runs = cross_fit(ds, &req, opts, |ctx| models.iter().map(|m| longitudinal_fold(ctx, lay, m)).collect())?;
    models
        .iter()
        .enumerate()
        .map(|(k, m)| assemble(ds, &runs, k, "longitudinal_effect", Some(model_name(m).into()), opts.level))
        .collect()
}

fn plan_estimate(ds: &FusedDataset, plan: SeqPlan, name: &str, opts: &OneStepOptions) -> Result<EstimateReport> {
    let runs = cross_fit(ds, &plan.requirements(), opts, |ctx| Ok(vec![plan_fold(ctx, &plan)?]))?;
    assemble(ds, &runs, 0, name, None, opts.level)
}

fn cate_fold(ctx: &FoldCtx) -> Result<FoldEval> {
    let num = eval_plan(ctx, &SeqPlan::static_contrast(4, &[2]), None)?;
    let den = eval_plan(ctx, &SeqPlan::static_contrast(3, &[2]), None)?;
    let ratio = |n: &[f64], d: &[f64]| -> Result<(f64, f64)> {
        let dv = den.seq.contrast(d);
        if dv.abs() < WEAK_ID_FLOOR {
            return Err(FusionError::Numerical(format!("weak identification: denominator {dv:.3e}")));
        }
        Ok((num.seq.contrast(n) / dv, dv))
    };
    let (phi, dv) = ratio(&num.values, &den.values)?;
    let train_plug = ratio(&num.train_values, &den.train_values).ok().map(|r| vec![r.0]);
    let d = (0..ctx.eval.len())
        .map(|k| vec![(num.seq.gradient(&num.terms[k]) - phi * den.seq.gradient(&den.terms[k])) / dv])
        .collect();
    Ok(FoldEval { plug: vec![phi], train_plug, d, ridge_fits: num.seq.ridge_fits + den.seq.ridge_fits })
}

fn z_plans(zf: &ZFunctional, y: usize, gamma: &[f64]) -> Vec<SeqPlan> {
    (0..zf.b)
        .map(|c| {
            let m = zf.m.clone();
            let g = gamma.to_vec();
            SeqPlan::mean(y).with_outcome(Arc::new(move |z: &[f64]| m(z, &g)[c]))
        })
        .collect()
}

fn z_map(ctx: &FoldCtx, zf: &ZFunctional, y: usize, rows: &[usize], gamma: &[f64]) -> Vec<f64> {
    z_plans(zf, y, gamma)
        .iter()
        .map(|p| {
            SeqFit::fit(ctx.dense, &ctx.train, &ctx.ds.spec, p, &ctx.opts.nuisance.outcome_learner, None)
                .and_then(|s| s.arm_values(ctx.dense, rows))
                .map_or(f64::NAN, |v| v[0])
        })
        .collect()
}

fn z_fold(ctx: &FoldCtx, zf: &ZFunctional, y: usize) -> Result<FoldEval> {
    let (gamma, jac) = newton_root(&|g: &[f64]| z_map(ctx, zf, y, &ctx.eval, g), &zf.gamma0)?;
    let b = zf.b;
    let v = DMatrix::from_fn(b, b, |i, k| jac[i][k]);
    let vinv = v.try_inverse().ok_or_else(|| FusionError::Numerical("singular V in Z-estimation".into()))?;
    let train_plug = newton_root(&|g: &[f64]| z_map(ctx, zf, y, &ctx.train, g), &gamma).ok().map(|r| r.0);
    let mut per = Vec::with_capacity(b);
    let mut ridge = 0;
    for p in z_plans(zf, y, &gamma) {
        let pe = eval_plan(ctx, &p, None)?;
        ridge += pe.seq.ridge_fits;
        per.push(pe);
    }
    let d = (0..ctx.eval.len())
        .map(|k| {
            let f: Vec<f64> = per.iter().map(|pe| pe.seq.gradient(&pe.terms[k])).collect();
            (0..b).map(|r| -(0..b).map(|c| vinv[(r, c)] * f[c]).sum::<f64>()).collect()
        })
        .collect();
    Ok(FoldEval { plug: gamma, train_plug, d, ridge_fits: ridge })
}

fn z_estimate(ds: &FusedDataset, zf: ZFunctional, y: usize, name: &str, opts: &OneStepOptions) -> Result<EstimateReport> {
    if let Some(m) = (1..=y).find(|&m| !ds.spec.is_relevant(m)) {
        return Err(FusionError::Config(format!("Z-estimation on data needs coordinates 1..{y} relevant; {m} is not")));
    }
    let req = Requirements { y, arms: vec![BTreeMap::new()] };
    let runs = cross_fit(ds, &req, opts, |ctx| Ok(vec![z_fold(ctx, &zf, y)?]))?;
    assemble(ds, &runs, 0, name, None, opts.level)
}

/// Nadaraya-Watson weighted empirical CDF of the outcome for one arm.
struct ArmCdf {
    x: Vec<f64>,
    outcome: Vec<f64>,
    w: Vec<f64>,
    kde: Kde<f64>,
}

impl ArmCdf {
    fn fit(dense: &Dense, pool: &[usize]) -> Result<Self> {
        if pool.is_empty() {
            return Err(FusionError::Precondition("empty arm pool for the quantile effect".into()));
        }
        let x: Vec<f64> = pool.iter().map(|&i| dense.z[i][0]).collect();
        let outcome = pool.iter().map(|&i| dense.z[i][2]).collect();
        let w: Vec<f64> = pool.iter().map(|&i| dense.w[i]).collect();
        let pts: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let kde = Kde::fit(&pts, Some(&w));
        Ok(ArmCdf { x, outcome, w, kde })
    }

    /// Mass on each pool outcome after averaging the conditional CDF over the
    /// covariates of `rows`.
    fn masses(&self, dense: &Dense, rows: &[usize]) -> Vec<f64> {
        let h = self.kde.bandwidths()[0];
        let n = self.x.len();
        let tw: f64 = self.w.iter().sum();
        let mut c = vec![0.0; n];
        let mut kv = vec![0.0; n];
        let mut wr = 0.0;
        for &i in rows {
            let xi = dense.z[i][0];
            let mut den = 0.0;
            for k in 0..n {
                kv[k] = self.w[k] * gauss((xi - self.x[k]) / h);
                den += kv[k];
            }
            let wi = dense.w[i];
            wr += wi;
            for k in 0..n {
                c[k] += wi * if den > 0.0 { kv[k] / den } else { self.w[k] / tw };
            }
        }
        c.iter().map(|v| v / wr).collect()
    }

    /// `P̂(Z₃ ≤ q | z₁)` for this arm.
    fn conditional(&self, z1: f64, q: f64) -> f64 {
        let ind: Vec<f64> = self.outcome.iter().map(|&v| (v <= q) as u8 as f64).collect();
        let (a, b) = self.kde.kernel_sums(&[z1], &ind);
        if a > 1e-300 {
            b / a
        } else {
            let tw: f64 = self.w.iter().sum();
            ind.iter().zip(&self.w).map(|(i, w)| i * w).sum::<f64>() / tw
        }
    }
}

/// Left-continuous inverse of a CDF tabulated on a grid, linearly
/// interpolated; returns the quantile and the local slope.
pub fn grid_quantile(grid: &[f64], cdf: &[f64], tau: f64) -> Result<(f64, f64)> {
    let g = cdf.iter().position(|&f| f >= tau).ok_or_else(|| FusionError::Numerical(format!("CDF never reaches {tau}")))?;
    let (a, b) = if g == 0 { (0, 1) } else { (g - 1, g) };
    let slope = (cdf[b] - cdf[a]) / (grid[b] - grid[a]);
    if !(slope > FLAT_QUANTILE_FLOOR) {
        return Err(FusionError::Numerical(format!("flat quantile: CDF slope {slope:.3e} at level {tau}")));
    }
    let q = if g == 0 { grid[0] } else { grid[a] + (tau - cdf[a]) / slope };
    Ok((q, slope))
}

fn arm_quantile(cdf: &ArmCdf, mass: &[f64], grid: &[f64], tau: f64) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| cdf.outcome[a].total_cmp(&cdf.outcome[b]));
    let mut tab = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut k = 0;
    for &u in grid {
        while k < order.len() && cdf.outcome[order[k]] <= u {
            acc += mass[order[k]];
            k += 1;
        }
        tab.push(acc);
    }
    grid_quantile(grid, &tab, tau)
}

fn qte_fold(ctx: &FoldCtx, tau: f64) -> Result<FoldEval> {
    let spec = &ctx.ds.spec;
    let dense = ctx.dense;
    let s1 = spec.fusion_set(1)?;
    let s3 = spec.fusion_set(3)?;
    let pool: Vec<usize> = ctx.train.iter().copied().filter(|&i| s3.contains(&dense.s[i]) && dense.observed_through(i, 3)).collect();
    let lo = pool.iter().map(|&i| dense.z[i][2]).fold(f64::INFINITY, f64::min);
    let hi = pool.iter().map(|&i| dense.z[i][2]).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(FusionError::Numerical("flat quantile: outcome range is degenerate".into()));
    }
    let grid: Vec<f64> = (0..QUANTILE_GRID).map(|g| lo + (hi - lo) * g as f64 / (QUANTILE_GRID - 1) as f64).collect();
    let rows_of = |rows: &[usize]| -> Vec<usize> { rows.iter().copied().filter(|&i| s1.contains(&dense.s[i]) && dense.observed_through(i, 1)).collect() };
    let (ev1, tr1) = (rows_of(&ctx.eval), rows_of(&ctx.train));
    let mut arms = Vec::new();
    let mut train_q = Some(Vec::new());
    for a in [1.0, 0.0] {
        let ap: Vec<usize> = pool.iter().copied().filter(|&i| dense.z[i][1] == a).collect();
        let cdf = ArmCdf::fit(dense, &ap)?;
        let (q, f) = arm_quantile(&cdf, &cdf.masses(dense, &ev1), &grid, tau)?;
        train_q = match (train_q, arm_quantile(&cdf, &cdf.masses(dense, &tr1), &grid, tau)) {
            (Some(mut v), Ok((tq, _))) => {
                v.push(tq);
                Some(v)
            }
            _ => None,
        };
        arms.push((cdf, q, f));
    }
    let d = ctx
        .eval
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let z = &dense.z[i];
            let mut out = 0.0;
            for (a, (cdf, q, f)) in arms.iter().enumerate() {
                let (w1, w3) = (ctx.weights[k][a][0], ctx.weights[k][a][1]);
                if w1 == 0.0 && w3 == 0.0 {
                    continue;
                }
                let v1 = cdf.conditional(z[0], *q);
                let mut t = w1 * (v1 - tau);
                if w3 != 0.0 {
                    t += w3 * (((z[2] <= *q) as u8 as f64) - v1);
                }
                let sign = if a == 0 { 1.0 } else { -1.0 };
                out -= sign * t / f;
            }
            vec![out]
        })
        .collect();
    Ok(FoldEval { plug: vec![arms[0].1 - arms[1].1], train_plug: train_q.map(|v| vec![v[0] - v[1]]), d, ridge_fits: 0 })
}

fn static_arms(j: usize) -> Vec<BTreeMap<usize, Policy>> {
    [1.0, 0.0].iter().map(|&v| [(j, Policy::Static { value: v })].into_iter().collect()).collect()
}

/// Plan of the off-policy value: reward at 3 with action 2 drawn from `policy`.
pub fn off_policy_plan(policy: &crate::estimands::EvalPolicy) -> SeqPlan {
    SeqPlan {
        y: 3,
        outcome: Arc::new(|z: &[f64]| z[2]),
        coefs: vec![1.0],
        arms: vec![[(2, Policy::Softmax { policy: policy.clone() })].into_iter().collect()],
    }
}

/// One-step estimate of `estimand` on `ds`.
pub fn one_step(ds: &FusedDataset, estimand: &EstimandSpec, opts: &OneStepOptions) -> Result<EstimateReport> {
    estimand.validate(ds.spec.d)?;
    let name = estimand.name();
    match estimand {
        EstimandSpec::LongitudinalEffect { t, model } => Ok(longitudinal(ds, *t, std::slice::from_ref(model), opts)?.remove(0)),
        EstimandSpec::IttAte => plan_estimate(ds, SeqPlan::static_contrast(4, &[2]), name, opts),
        EstimandSpec::OffPolicy { policy } => plan_estimate(ds, off_policy_plan(policy), name, opts),
        EstimandSpec::Cate => {
            let req = Requirements { y: 4, arms: static_arms(2) };
            let runs = cross_fit(ds, &req, opts, |ctx| Ok(vec![cate_fold(ctx)?]))?;
            assemble(ds, &runs, 0, name, None, opts.level)
        }
        EstimandSpec::QuantileTe { tau, .. } => {
            let req = Requirements { y: 3, arms: static_arms(2) };
            let runs = cross_fit(ds, &req, opts, |ctx| Ok(vec![qte_fold(ctx, *tau)?]))?;
            assemble(ds, &runs, 0, name, None, opts.level)
        }
        EstimandSpec::ZEstimation { family } => {
            let zf = match family {
                ZFamily::Mean { outcome } => z_mean(*outcome),
                ZFamily::LeastSquares { outcome, covariates } => least_squares(*outcome, covariates.clone()),
                ZFamily::Logistic { outcome, covariate } => kl_logistic(*covariate, *outcome),
            };
            z_estimate(ds, zf, estimand.min_d(), name, opts)
        }
        EstimandSpec::KlLogistic { covariate, outcome } => z_estimate(ds, kl_logistic(*covariate, *outcome), estimand.min_d(), name, opts),
    }
}
