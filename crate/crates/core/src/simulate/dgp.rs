//! Nine-source longitudinal design with four periods: covariates `U_1..U_3`,
//! treatments `A_1..A_3` and outcome `Y` in slots 1..7.

use crate::data::{FusedDataset, FusionSpec, ObservationRecord, Value};
use crate::error::{FusionError, Result};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

/// Number of slots.
pub const D: usize = 7;
/// Number of sources.
pub const K: usize = 9;
/// Periods.
pub const T: usize = 4;
/// Source sample sizes.
pub const SIZES: [usize; K] = [2000, 400, 2000, 400, 2000, 4000, 2000, 4000, 2000];
/// Observed prefix length per source.
pub const OBSERVED: [usize; K] = [1, 1, 3, 3, 5, 7, 5, 7, 7];

/// Fusion scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    None,
    Partial,
    Complete,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::None, Scenario::Partial, Scenario::Complete];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::Partial => "partial",
            Scenario::Complete => "complete",
        }
    }

    pub fn spec(&self) -> FusionSpec {
        let sets: Vec<(usize, Vec<usize>)> = match self {
            Scenario::None => vec![(1, vec![9]), (3, vec![9]), (5, vec![9]), (7, vec![9])],
            Scenario::Partial => vec![(1, vec![1, 3, 9]), (3, vec![3, 9]), (5, vec![5, 9]), (7, vec![6, 9])],
            Scenario::Complete => vec![(1, vec![1, 3, 9]), (3, vec![3, 5, 7, 9]), (5, vec![5, 6, 8, 9]), (7, vec![6, 8, 9])],
        };
        FusionSpec::new(D, K, sets)
    }
}

/// Generating parameters. Sizes may be rescaled; the laws are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongitudinalDgp {
    pub sizes: Vec<usize>,
    /// Error scale `α` in `ε = α U_3 t_ν`.
    pub alpha: f64,
    pub nu: f64,
}

impl Default for LongitudinalDgp {
    fn default() -> Self {
        LongitudinalDgp { sizes: SIZES.to_vec(), alpha: 0.1, nu: 3.0 }
    }
}

/// Target mean and covariance of `(U_1, U_2, U_3)` given `(A_1, A_2)`.
pub fn target_mvn(a1: u8, a2: u8) -> (Vector3<f64>, Matrix3<f64>) {
    let base = |s33: f64| Matrix3::new(1.0, 0.8, 0.5, 0.8, 2.0, 0.5, 0.5, 0.5, s33);
    match (a1, a2) {
        (0, 0) => (Vector3::new(0.0, 1.0, 10.0), base(1.0)),
        (1, 0) => (Vector3::new(0.0, 1.5, 20.0), base(1.0)),
        (0, 1) => (Vector3::new(0.0, 1.0, 20.0), base(3.0)),
        _ => (Vector3::new(0.0, 1.5, 40.0), Matrix3::new(1.0, 0.8, 0.6, 0.8, 2.0, 0.8, 0.6, 0.8, 4.0)),
    }
}

/// Intercept of the outcome mean by treatment history.
pub fn outcome_intercept(a: [u8; 3]) -> f64 {
    match a {
        [0, 0, 0] => 5.0,
        [1, 0, 0] | [0, 1, 0] => 8.0,
        [0, 0, 1] => 9.0,
        [1, 1, 0] | [1, 0, 1] => 10.0,
        [0, 1, 1] => 12.0,
        _ => 15.0,
    }
}

/// `E[Y | U, A]`.
pub fn outcome_mean(u: &[f64; 3], a: [u8; 3]) -> f64 {
    let (mu, sig) = target_mvn(a[0], a[1]);
    let inv = sig.try_inverse().expect("positive definite");
    let du = Vector3::new(u[0], u[1], u[2]) - mu;
    outcome_intercept(a) + (mu.transpose() * inv * du)[0]
}

/// Exact `E[Y(1,1,1)] − E[Y(0,0,0)]`: the centered terms vanish in each arm.
pub fn true_effect() -> f64 {
    outcome_intercept([1, 1, 1]) - outcome_intercept([0, 0, 0])
}

/// `N(μ, σ²)` conditional of `U_k` on earlier `U`s under the target MVN.
fn target_conditional(a1: u8, a2: u8, k: usize, u: &[f64]) -> (f64, f64) {
    let (mu, sig) = target_mvn(a1, a2);
    if k == 0 {
        return (mu[0], sig[(0, 0)]);
    }
    let s11 = sig.view((0, 0), (k, k)).into_owned();
    let s21 = sig.view((k, 0), (1, k)).into_owned();
    let inv = s11.try_inverse().expect("positive definite");
    let du = nalgebra::DVector::from_iterator(k, (0..k).map(|i| u[i] - mu[i]));
    let coef = &s21 * &inv;
    let mean = mu[k] + (&coef * du)[0];
    let var = sig[(k, k)] - (&coef * s21.transpose())[(0, 0)];
    (mean, var)
}

fn off_target_u2(a1: u8, u1: f64) -> (f64, f64) {
    (if a1 == 0 { 3.0 + 1.8 * u1 } else { 5.0 + 0.8 * u1 }, 5.0)
}

fn off_target_u3(a1: u8, a2: u8, u1: f64, u2: f64) -> (f64, f64) {
    match (a1, a2) {
        (0, 0) => (20.0 + 0.44 * u1 + 0.07 * u2, 0.74),
        (0, 1) => (-10.0 + 0.71 * u1 + 0.12 * u2, 2.34),
        (1, 0) => (10.0 + 0.44 * u1 + 0.07 * u2, 0.74),
        _ => (10.0 + 0.41 * u1 + 0.24 * u2, 3.56),
    }
}

/// Sources whose covariate law at `U_t` (t = 1, 2, 3) is the target's.
fn on_target(t: usize, s: usize) -> bool {
    match t {
        1 => matches!(s, 1 | 3 | 9),
        2 => matches!(s, 3 | 5 | 7 | 9),
        _ => matches!(s, 5 | 6 | 8 | 9),
    }
}

fn normal<R: Rng>(rng: &mut R, mean: f64, var: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

impl LongitudinalDgp {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() != K {
            return Err(FusionError::Config(format!("sizes needs {K} entries")));
        }
        if !(self.alpha > 0.0) || !(self.nu > 0.0) {
            return Err(FusionError::Config("alpha and nu must be positive".into()));
        }
        Ok(())
    }

    /// Sizes multiplied by `f` (rounded, at least one row per source).
    pub fn scaled(&self, f: f64) -> Self {
        LongitudinalDgp { sizes: self.sizes.iter().map(|&n| ((n as f64 * f).round() as usize).max(1)).collect(), ..self.clone() }
    }

    pub fn n(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn error<R: Rng>(&self, rng: &mut R, u3: f64) -> Result<f64> {
        let t = StudentT::new(self.nu).map_err(|e| FusionError::Config(e.to_string()))?;
        Ok(self.alpha * u3 * t.sample(rng))
    }

    /// Full target draw `(U_1, A_1, U_2, A_2, U_3, A_3, Y)`.
    fn row<R: Rng>(&self, rng: &mut R, s: usize) -> Result<[f64; D]> {
        let a: [u8; 3] = [rng.random_bool(0.5) as u8, rng.random_bool(0.5) as u8, rng.random_bool(0.5) as u8];
        let mut u = [0.0; 3];
        let (m, v) = if on_target(1, s) { target_conditional(a[0], a[1], 0, &u) } else { (3.0, 2.0) };
        u[0] = normal(rng, m, v);
        let (m, v) = if on_target(2, s) { target_conditional(a[0], a[1], 1, &u) } else { off_target_u2(a[0], u[0]) };
        u[1] = normal(rng, m, v);
        let (m, v) = if on_target(3, s) { target_conditional(a[0], a[1], 2, &u) } else { off_target_u3(a[0], a[1], u[0], u[1]) };
        u[2] = normal(rng, m, v);
        let y = outcome_mean(&u, a) + self.error(rng, u[2])?;
        Ok([u[0], a[0] as f64, u[1], a[1] as f64, u[2], a[2] as f64, y])
    }

    /// Records for every source in order, using one stream of `rng`.
    pub fn records<R: Rng>(&self, rng: &mut R) -> Result<Vec<ObservationRecord>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.n());
        for (k, &n) in self.sizes.iter().enumerate() {
            let s = k + 1;
            for _ in 0..n {
                let r = self.row(rng, s)?;
                let z = (0..D).map(|j| if j < OBSERVED[k] { Value::Real(r[j]) } else { Value::Missing }).collect();
                out.push(ObservationRecord::new(z, s));
            }
        }
        Ok(out)
    }

    /// Dataset for replication `rep` of a run seeded with `seed`.
    pub fn generate(&self, scenario: Scenario, seed: u64, rep: u64) -> Result<FusedDataset> {
        let mut rng = rep_rng(seed, rep);
        Ok(FusedDataset::new(self.records(&mut rng)?, scenario.spec()))
    }

    /// Counterfactual Monte Carlo estimate of the effect and its standard
    /// error from `draws` target draws per arm.
    pub fn truth_mc(&self, draws: usize, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = [(0.0, 0.0); 2];
        for (k, a) in [1u8, 0].into_iter().enumerate() {
            let (mu, sig) = target_mvn(a, a);
            let l = sig.cholesky().ok_or_else(|| FusionError::Numerical("covariance not positive definite".into()))?.l();
            for _ in 0..draws {
                let e = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                let u = mu + l * e;
                let y = outcome_mean(&[u[0], u[1], u[2]], [a; 3]) + self.error(&mut rng, u[2])?;
                stats[k].0 += y;
                stats[k].1 += y * y;
            }
        }
        let n = draws as f64;
        let mean = |s: (f64, f64)| s.0 / n;
        let var = |s: (f64, f64)| (s.1 / n - (s.0 / n).powi(2)) * n / (n - 1.0);
        Ok((mean(stats[0]) - mean(stats[1]), ((var(stats[0]) + var(stats[1])) / n).sqrt()))
    }
}

/// Counter-based stream for replication `rep`: the seed fixes the key and the
/// replication index selects the stream, so draws do not depend on schedule.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}
