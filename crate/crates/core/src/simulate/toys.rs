//! Catalog of finite fused models. Each satisfies the alignment condition
//! exactly: aligned sources share one conditional table per coordinate.

use crate::data::{FusionSpec, ModelClass, ScoreTable};
use crate::discrete::{DiscreteModel, Factors, Grid, PrefixFn};
use crate::estimands::{EstimandSpec, EvalPolicy, ZFamily};
use crate::error::{FusionError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Catalog ids.
pub const CATALOG: [&str; 11] =
    ["nested", "itt", "ope", "qte", "dag", "cmr", "repeated", "symmetric", "parametric", "longitudinal", "kl"];

/// A finite fused model with the estimands it is used for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy {
    pub id: String,
    pub model: DiscreteModel,
    pub estimands: Vec<EstimandSpec>,
}

impl Toy {
    /// Fixture text; [`Toy::from_json`] reads it back.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FusionError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn from_json(text: &str) -> Result<Toy> {
        let toy: Toy = serde_json::from_str(text).map_err(|e| FusionError::Config(format!("toy fixture: {e}")))?;
        toy.model.check_pmf()?;
        Ok(toy)
    }

    /// Writes `<dir>/<id>.json`, refusing to overwrite an existing file.
    pub fn write_fixture(&self, dir: &std::path::Path) -> Result<std::path::PathBuf> {
        let path = dir.join(format!("{}.json", self.id));
        let mut f = std::fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
        std::io::Write::write_all(&mut f, self.to_json()?.as_bytes())?;
        Ok(path)
    }
}

fn positive_row<R: Rng>(rng: &mut R, l: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
    let t: f64 = w.iter().sum();
    w.iter().map(|v| v / t).collect()
}

fn random_table<R: Rng>(rng: &mut R, grid: &Grid, j: usize) -> PrefixFn {
    (0..grid.prefix_len(j - 1)).flat_map(|_| positive_row(rng, grid.size(j))).collect()
}

/// Assembles a model: aligned sources use `target[j]`; every other
/// (coordinate, source) pair gets its own random conditional.
fn assemble<R: Rng>(
    rng: &mut R,
    grid: Grid,
    spec: FusionSpec,
    target: &BTreeMap<usize, PrefixFn>,
    fixed: BTreeMap<usize, PrefixFn>,
) -> DiscreteModel {
    let k = spec.k;
    let p_s = positive_row(rng, k);
    let mut conds = Vec::new();
    for j in 1..=grid.d() {
        let mut c = vec![0.0; grid.prefix_len(j) * k];
        let l = grid.size(j);
        for s in 1..=k {
            let tab = match target.get(&j) {
                Some(t) if spec.is_relevant(j) && spec.in_fusion_set(j, s) => t.clone(),
                _ => random_table(rng, &grid, j),
            };
            for h in 0..grid.prefix_len(j - 1) {
                for z in 0..l {
                    c[(h * l + z) * k + s - 1] = tab[h * l + z];
                }
            }
        }
        conds.push(c);
    }
    DiscreteModel::from_factors(grid, spec, &Factors { p_s, conds }, fixed)
}

fn binary() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn range(n: usize) -> Vec<f64> {
    (0..n).map(|v| v as f64).collect()
}

/// Random targets for every relevant coordinate of `spec`.
fn random_targets<R: Rng>(rng: &mut R, grid: &Grid, spec: &FusionSpec) -> BTreeMap<usize, PrefixFn> {
    spec.relevant.iter().map(|&j| (j, random_table(rng, grid, j))).collect()
}

/// Conditional pmf on `{0, 1, 2}` with mean `m ∈ (0.4, 1.6)`.
fn pmf_with_mean<R: Rng>(rng: &mut R, m: f64) -> Vec<f64> {
    let lo = (1.0 - m).max(0.0);
    let hi = (2.0 - m) / 2.0;
    let a = lo + (hi - lo) * rng.random_range(0.25..0.75);
    let b = a + m - 1.0;
    vec![a, 1.0 - a - b, b]
}

/// Symmetric pmf on the lattice `0..l` centered at `c` (integer or half).
fn symmetric_pmf<R: Rng>(rng: &mut R, l: usize, c: f64) -> Vec<f64> {
    let max_d = c.min(l as f64 - 1.0 - c);
    let mut w = vec![0.0; l];
    let mut by_dist: BTreeMap<i64, f64> = BTreeMap::new();
    for (z, wz) in w.iter_mut().enumerate() {
        let dist = (z as f64 - c).abs();
        if dist <= max_d + 1e-12 {
            let key = (2.0 * dist).round() as i64;
            let v = *by_dist.entry(key).or_insert_with(|| rng.random_range(0.3..1.0) / (1.0 + dist));
            *wz = v;
        }
    }
    let t: f64 = w.iter().sum();
    w.iter().map(|v| v / t).collect()
}

fn longitudinal_grid(y_levels: usize) -> Grid {
    Grid::scalar(vec![binary(), binary(), range(y_levels)])
}

fn longitudinal_effect() -> EstimandSpec {
    EstimandSpec::LongitudinalEffect { t: 2, model: Default::default() }
}

/// Builds catalog entry `id` from `seed`.
pub fn make_discrete_toy(id: &str, seed: u64) -> Result<Toy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_id(id));
    let rng = &mut rng;
    let (model, estimands) = match id {
        "nested" => {
            let grid = Grid::scalar(vec![vec![0.0, 1.0, 3.0], vec![0.0, 1.0, 2.0]]);
            let spec = FusionSpec::new(2, 2, vec![(1, vec![1, 2]), (2, vec![1])]);
            let t = random_targets(rng, &grid, &spec);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 2 } }])
        }
        "itt" => {
            let grid = Grid::scalar(vec![binary(); 4]);
            let spec = FusionSpec::new(4, 3, vec![(1, vec![1, 2, 3]), (3, vec![1, 2]), (4, vec![2, 3])]);
            let mut t = random_targets(rng, &grid, &spec);
            // Uptake follows assignment closely so the complier share is large.
            let uptake: PrefixFn = (0..grid.prefix_len(2))
                .flat_map(|p| {
                    let on = if grid.value(p, 2, 2) == 1.0 { rng.random_range(0.75..0.9) } else { rng.random_range(0.1..0.25) };
                    [1.0 - on, on]
                })
                .collect();
            t.insert(3, uptake);
            let fixed = [(2, vec![0.6, 0.4, 0.45, 0.55])].into_iter().collect();
            (assemble(rng, grid, spec, &t, fixed), vec![EstimandSpec::IttAte, EstimandSpec::Cate])
        }
        "ope" => {
            let grid = Grid::scalar(vec![range(3), range(3), range(3)]);
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (3, vec![2])]);
            let t = random_targets(rng, &grid, &spec);
            let policy = EvalPolicy {
                actions: range(3),
                intercepts: vec![0.2, -0.1, 0.4],
                slopes: vec![vec![0.3], vec![-0.5], vec![0.1]],
            };
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::OffPolicy { policy }])
        }
        "qte" => {
            let grid = Grid::scalar(vec![binary(), binary(), range(5)]);
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (3, vec![2])]);
            let t = random_targets(rng, &grid, &spec);
            let fixed = [(2, vec![0.5, 0.5, 0.3, 0.7])].into_iter().collect();
            (assemble(rng, grid, spec, &t, fixed), vec![EstimandSpec::QuantileTe { tau: 0.5, width: 1.0 }])
        }
        "dag" => {
            let grid = Grid::scalar(vec![binary(), range(3), range(3)]);
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (2, vec![1]), (3, vec![2])])
                .with_class(3, ModelClass::DagParents { parents: vec![1] });
            let mut t = random_targets(rng, &grid, &spec);
            let by_parent: Vec<Vec<f64>> = (0..2).map(|_| positive_row(rng, 3)).collect();
            t.insert(3, (0..grid.prefix_len(3)).map(|p| by_parent[grid.decode(p, 3)[0]][p % 3]).collect());
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 3 } }])
        }
        "cmr" => {
            let grid = Grid::scalar(vec![binary(), binary(), range(3)]);
            let (intercept, slopes) = (0.7, vec![0.4, 0.3]);
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (2, vec![1, 2]), (3, vec![2])])
                .with_class(3, ModelClass::ConditionalMoment { intercept, slopes: slopes.clone() });
            let mut t = random_targets(rng, &grid, &spec);
            let tab: PrefixFn = (0..grid.prefix_len(2))
                .flat_map(|h| {
                    let m = intercept + slopes[0] * grid.value(h, 2, 1) + slopes[1] * grid.value(h, 2, 2);
                    pmf_with_mean(rng, m)
                })
                .collect();
            t.insert(3, tab);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 3 } }])
        }
        "repeated" => {
            let pairs: Vec<Vec<f64>> = (0..3).flat_map(|a| (0..3).map(move |b| vec![a as f64, b as f64])).collect();
            let grid = Grid { levels: vec![vec![vec![0.0], vec![1.0]], pairs] };
            let spec = FusionSpec::new(2, 2, vec![(1, vec![1, 2]), (2, vec![2])]).with_class(2, ModelClass::RepeatedMeasures { r: 2 });
            let mut t = random_targets(rng, &grid, &spec);
            let tab: PrefixFn = (0..2)
                .flat_map(|_| {
                    let mut w = [[0.0; 3]; 3];
                    for a in 0..3 {
                        for b in a..3 {
                            let v = rng.random_range(0.2..1.0);
                            w[a][b] = v;
                            w[b][a] = v;
                        }
                    }
                    let flat: Vec<f64> = w.iter().flatten().copied().collect();
                    let tot: f64 = flat.iter().sum();
                    flat.into_iter().map(move |v| v / tot)
                })
                .collect();
            t.insert(2, tab);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::ZEstimation { family: ZFamily::Mean { outcome: 2 } }])
        }
        "symmetric" => {
            let grid = longitudinal_grid(7);
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (3, vec![2])]).with_class(3, ModelClass::Symmetric);
            let mut t = random_targets(rng, &grid, &spec);
            let centers = [2.0, 2.5, 4.0, 3.5];
            let tab: PrefixFn = (0..grid.prefix_len(2)).flat_map(|h| symmetric_pmf(rng, 7, centers[h])).collect();
            t.insert(3, tab);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![longitudinal_effect()])
        }
        "parametric" => {
            let grid = longitudinal_grid(4);
            let beta = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.3..0.6)];
            let base: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut tab = vec![0.0; grid.prefix_len(3)];
            let mut values = vec![Vec::new(); grid.prefix_len(3)];
            for h in 0..grid.prefix_len(2) {
                let (u1, a1) = (grid.value(h, 2, 1), grid.value(h, 2, 2));
                let w: Vec<f64> =
                    (0..4).map(|y| (y as f64 * (beta[0] + beta[1] * u1 + beta[2] * a1 * (1.0 - u1)) + base[y]).exp()).collect();
                let tot: f64 = w.iter().sum();
                let mean: f64 = (0..4).map(|y| y as f64 * w[y] / tot).sum();
                for y in 0..4 {
                    tab[h * 4 + y] = w[y] / tot;
                    let r = y as f64 - mean;
                    values[h * 4 + y] = vec![r, r * u1, r * a1 * (1.0 - u1)];
                }
            }
            let spec = FusionSpec::new(3, 2, vec![(1, vec![1, 2]), (3, vec![2])])
                .with_class(3, ModelClass::Parametric { score: ScoreTable { dim: 3, values } });
            let mut t = random_targets(rng, &grid, &spec);
            t.insert(3, tab);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![longitudinal_effect()])
        }
        "longitudinal" => {
            let grid = Grid::scalar(vec![range(3), binary(), range(3)]);
            let spec = FusionSpec::new(3, 3, vec![(1, vec![1, 2]), (3, vec![2, 3])]);
            let t = random_targets(rng, &grid, &spec);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![longitudinal_effect()])
        }
        "kl" => {
            let grid = Grid::scalar(vec![range(3), binary()]);
            let spec = FusionSpec::new(2, 2, vec![(1, vec![1, 2]), (2, vec![2])]);
            let t = random_targets(rng, &grid, &spec);
            (assemble(rng, grid, spec, &t, BTreeMap::new()), vec![EstimandSpec::KlLogistic { covariate: 1, outcome: 2 }])
        }
        other => return Err(FusionError::Config(format!("unknown toy id {other:?}"))),
    };
    model.check_pmf()?;
    Ok(Toy { id: id.to_string(), model, estimands })
}

/// Every catalog entry for `seed`.
pub fn catalog(seed: u64) -> Result<Vec<Toy>> {
    CATALOG.iter().map(|id| make_discrete_toy(id, seed)).collect()
}

fn hash_id(id: &str) -> u64 {
    // FNV-1a, to give each toy its own stream for the same seed.
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
