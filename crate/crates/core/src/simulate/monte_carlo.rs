//! Monte Carlo replications of the longitudinal effect estimators over fusion
//! scenarios, summarized as bias, variance and coverage.

use super::dgp::{rep_rng, LongitudinalDgp, Scenario, T};
use crate::estimands::LongitudinalModel;
use crate::error::{FusionError, Result};
use crate::nuisance::{Basis, Learner};
use crate::onestep::{longitudinal, OneStepOptions};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Counterfactual draws per arm for the truth.
pub const TRUTH_DRAWS: usize = 1_000_000;
/// Seed of the truth simulation; fixed so the truth depends on the DGP only.
pub const TRUTH_SEED: u64 = 0x7275_7468;
/// Largest tolerated fraction of failed replications per cell.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Monte Carlo experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub dgp: LongitudinalDgp,
    pub scenarios: Vec<Scenario>,
    pub models: Vec<LongitudinalModel>,
    pub reps: usize,
    pub seed: u64,
    pub options: OneStepOptions,
    /// Known truth with its standard error; simulated when absent.
    pub truth: Option<(f64, f64)>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig::table1()
    }
}

impl MonteCarloConfig {
    /// All scenarios and outcome models at the source-table sample sizes,
    /// 200 replications, linear regressions with pairwise interactions for
    /// the outcome recursion.
    pub fn table1() -> Self {
        let mut options = OneStepOptions::default();
        options.nuisance.outcome_learner = Learner::Linear { basis: Basis::Pairwise };
        MonteCarloConfig {
            dgp: LongitudinalDgp::default(),
            scenarios: Scenario::ALL.to_vec(),
            models: vec![LongitudinalModel::Nonparametric, LongitudinalModel::Symmetric, LongitudinalModel::Linear { kappa: Default::default(), nu: 3.0 }],
            reps: 200,
            seed: 20_230_601,
            options,
            truth: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(MonteCarloConfig::table1()),
            _ => Err(FusionError::Config(format!("unknown simulation preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(FusionError::Config("reps must be at least 1".into()));
        }
        if self.scenarios.is_empty() || self.models.is_empty() {
            return Err(FusionError::Config("at least one scenario and one model are required".into()));
        }
        self.dgp.validate()?;
        self.options.validate()
    }
}

/// One (model, scenario) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub scenario: Scenario,
    pub bias: f64,
    /// Sample variance of the estimates; absent with fewer than two.
    pub var: Option<f64>,
    /// Percentage of intervals containing the truth.
    pub coverage: f64,
    pub mean_se: f64,
    pub ok: usize,
    pub failed: usize,
}

/// Bias, variance and coverage per model and scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub reps: usize,
    pub seed: u64,
    pub truth: f64,
    pub truth_se: f64,
    pub level: f64,
    /// False when some cell lost more than the tolerated share of replications.
    pub valid: bool,
    /// First failure message per cell, if any.
    pub failures: Vec<String>,
}

impl MetricTable {
    pub fn row(&self, model: &str, scenario: Scenario) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.scenario == scenario)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "scenario", "bias", "var", "coverage", "mean_se", "ok", "failed"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.scenario.name().to_string(),
                format!("{:.6}", r.bias),
                r.var.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format!("{:.1}", r.coverage),
                format!("{:.6}", r.mean_se),
                r.ok.to_string(),
                r.failed.to_string(),
            ])
            .map_err(io)?;
        }
        String::from_utf8(w.into_inner().map_err(io)?).map_err(io)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(io)
    }
}

fn io(e: impl std::fmt::Display) -> FusionError {
    FusionError::Io(std::io::Error::other(e.to_string()))
}

/// Estimates and standard errors of one replication, `[scenario][model]`.
type RepResult = Vec<std::result::Result<Vec<(f64, f64)>, String>>;

fn run_rep(cfg: &MonteCarloConfig, rep: u64) -> RepResult {
    let records = cfg.dgp.records(&mut rep_rng(cfg.seed, rep));
    cfg.scenarios
        .iter()
        .map(|sc| {
            let recs = records.as_ref().map_err(|e| e.to_string())?;
            let ds = crate::data::FusedDataset::new(recs.clone(), sc.spec());
            let mut opts = cfg.options.clone();
            opts.nuisance.fold_seed = rep_rng(cfg.seed ^ 0xf01d, rep).random();
            let reports = longitudinal(&ds, T, &cfg.models, &opts).map_err(|e| e.to_string())?;
            Ok(reports.iter().map(|r| (r.estimate[0], r.se[0])).collect())
        })
        .collect()
}

/// Runs the experiment on `threads` workers (0 for the default pool).
/// Replication `r` draws from stream `r` of the seed, so the table does not
/// depend on the thread count.
pub fn run_monte_carlo(cfg: &MonteCarloConfig, threads: usize) -> Result<MetricTable> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| FusionError::Config(e.to_string()))?;
    pool.install(|| {
        let (truth, truth_se) = match cfg.truth {
            Some(t) => t,
            None => cfg.dgp.truth_mc(TRUTH_DRAWS, TRUTH_SEED)?,
        };
        let results: Vec<RepResult> = (0..cfg.reps as u64).into_par_iter().map(|r| run_rep(cfg, r)).collect();
        Ok(summarize(cfg, &results, truth, truth_se))
    })
}

fn summarize(cfg: &MonteCarloConfig, results: &[RepResult], truth: f64, truth_se: f64) -> MetricTable {
    let z = crate::stats::normal_quantile(0.5 + cfg.options.level / 2.0);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut valid = true;
    for (si, &sc) in cfg.scenarios.iter().enumerate() {
        for (mi, model) in cfg.models.iter().enumerate() {
            let mut est = Vec::new();
            let mut covered = 0usize;
            let mut se_sum = 0.0;
            let mut failed = 0usize;
            let mut first_err = None;
            for rep in results {
                match &rep[si] {
                    Ok(v) => {
                        let (e, se) = v[mi];
                        est.push(e);
                        se_sum += se;
                        if (e - truth).abs() <= z * se {
                            covered += 1;
                        }
                    }
                    Err(msg) => {
                        failed += 1;
                        first_err.get_or_insert_with(|| msg.clone());
                    }
                }
            }
            let name = crate::onestep::model_name(model).to_string();
            if let Some(msg) = first_err {
                failures.push(format!("{name}/{}: {msg}", sc.name()));
            }
            if failed as f64 > MAX_FAILURE_RATE * results.len() as f64 {
                valid = false;
            }
            let ok = est.len();
            let n = ok as f64;
            let mean = if ok > 0 { est.iter().sum::<f64>() / n } else { f64::NAN };
            let var = (ok > 1).then(|| est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0));
            rows.push(MetricRow {
                model: name,
                scenario: sc,
                bias: mean - truth,
                var,
                coverage: if ok > 0 { 100.0 * covered as f64 / n } else { f64::NAN },
                mean_se: if ok > 0 { se_sum / n } else { f64::NAN },
                ok,
                failed,
            });
        }
    }
    MetricTable { rows, reps: cfg.reps, seed: cfg.seed, truth, truth_se, level: cfg.options.level, valid, failures }
}
