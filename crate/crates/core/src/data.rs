//! Observed-data records, fusion structure, validation and ingestion.

use crate::error::{FusionError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One coordinate slot of an observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Real(f64),
    Cat(i64),
    Missing,
}

impl Value {
    /// Wraps a float, mapping NaN to `Missing`.
    pub fn real(x: f64) -> Value {
        if x.is_nan() {
            Value::Missing
        } else {
            Value::Real(x)
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Numeric view; categorical codes map to their integer value.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Real(x) => Some(x),
            Value::Cat(c) => Some(c as f64),
            Value::Missing => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub z: Vec<Value>,
    pub s: usize,
    pub w: f64,
}

impl ObservationRecord {
    pub fn new(z: Vec<Value>, s: usize) -> Self {
        ObservationRecord { z, s, w: 1.0 }
    }

    pub fn from_reals(z: &[f64], s: usize) -> Self {
        Self::new(z.iter().map(|&x| Value::real(x)).collect(), s)
    }

    /// Value of coordinate `j` (1-based).
    pub fn get(&self, j: usize) -> Option<f64> {
        self.z.get(j - 1).and_then(Value::as_f64)
    }

    /// Values of coordinates `1..=j`, or `None` if any is missing.
    pub fn history(&self, j: usize) -> Option<Vec<f64>> {
        (1..=j).map(|m| self.get(m)).collect()
    }

    pub fn observed_through(&self, j: usize) -> bool {
        (1..=j).all(|m| self.z.get(m - 1).is_some_and(|v| !v.is_missing()))
    }
}

/// Score table for a finite parametric family: `values[p]` is the score
/// vector at prefix index `p` of `z̄_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub dim: usize,
    pub values: Vec<Vec<f64>>,
}

/// Restriction on the conditional law of `Z_j` given its history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ModelClass {
    #[default]
    Nonparametric,
    /// `E{g₀(Z̄_j) | z̄_{j−1}} = 0` with the linear moment
    /// `g₀ = z_j − intercept − slopes·z̄_{j−1}` (first component of `z_j`).
    ConditionalMoment { intercept: f64, slopes: Vec<f64> },
    /// `Z_j` has `r` exchangeable components.
    RepeatedMeasures { r: usize },
    /// `Z_j` depends on its history only through the listed coordinates.
    DagParents { parents: Vec<usize> },
    /// Conditional law symmetric about its conditional mean.
    Symmetric,
    /// Finite-dimensional family with the given score.
    Parametric { score: ScoreTable },
}

impl ModelClass {
    pub fn is_nonparametric(&self) -> bool {
        matches!(self, ModelClass::Nonparametric)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelClass::Nonparametric => "nonparametric",
            ModelClass::ConditionalMoment { .. } => "conditional_moment",
            ModelClass::RepeatedMeasures { .. } => "repeated_measures",
            ModelClass::DagParents { .. } => "dag_parents",
            ModelClass::Symmetric => "symmetric",
            ModelClass::Parametric { .. } => "parametric",
        }
    }
}

/// Fusion structure: relevant coordinates, their fusion sets and model
/// classes. Coordinates and sources are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecFile", into = "SpecFile")]
pub struct FusionSpec {
    pub d: usize,
    pub k: usize,
    pub relevant: BTreeSet<usize>,
    pub fusion_sets: BTreeMap<usize, BTreeSet<usize>>,
    pub model_class: BTreeMap<usize, ModelClass>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SpecFile {
    d: usize,
    k: usize,
    #[serde(rename = "J")]
    relevant: Vec<usize>,
    fusion_sets: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    model_class: BTreeMap<String, ModelClass>,
}

impl TryFrom<SpecFile> for FusionSpec {
    type Error = String;
    fn try_from(f: SpecFile) -> std::result::Result<Self, String> {
        let key = |s: &String| s.trim().parse::<usize>().map_err(|_| format!("bad coordinate key {s:?}"));
        let mut fusion_sets = BTreeMap::new();
        for (j, v) in &f.fusion_sets {
            fusion_sets.insert(key(j)?, v.iter().copied().collect());
        }
        let mut model_class = BTreeMap::new();
        for (j, m) in &f.model_class {
            model_class.insert(key(j)?, m.clone());
        }
        Ok(FusionSpec { d: f.d, k: f.k, relevant: f.relevant.into_iter().collect(), fusion_sets, model_class })
    }
}

impl From<FusionSpec> for SpecFile {
    fn from(s: FusionSpec) -> SpecFile {
        SpecFile {
            d: s.d,
            k: s.k,
            relevant: s.relevant.iter().copied().collect(),
            fusion_sets: s.fusion_sets.iter().map(|(j, v)| (j.to_string(), v.iter().copied().collect())).collect(),
            model_class: s.model_class.iter().map(|(j, m)| (j.to_string(), m.clone())).collect(),
        }
    }
}

impl FusionSpec {
    /// Spec with all coordinates relevant and the given fusion sets.
    pub fn new(d: usize, k: usize, fusion_sets: Vec<(usize, Vec<usize>)>) -> Self {
        let fusion_sets: BTreeMap<usize, BTreeSet<usize>> =
            fusion_sets.into_iter().map(|(j, v)| (j, v.into_iter().collect())).collect();
        let relevant = fusion_sets.keys().copied().collect();
        FusionSpec { d, k, relevant, fusion_sets, model_class: BTreeMap::new() }
    }

    /// Single-source spec with every coordinate relevant.
    pub fn single_source(d: usize) -> Self {
        Self::new(d, 1, (1..=d).map(|j| (j, vec![1])).collect())
    }

    pub fn with_class(mut self, j: usize, class: ModelClass) -> Self {
        self.model_class.insert(j, class);
        self
    }

    pub fn is_relevant(&self, j: usize) -> bool {
        self.relevant.contains(&j)
    }

    /// Irrelevant coordinates `I = [d] \ J`.
    pub fn irrelevant(&self) -> Vec<usize> {
        (1..=self.d).filter(|j| !self.relevant.contains(j)).collect()
    }

    pub fn fusion_set(&self, j: usize) -> Result<&BTreeSet<usize>> {
        if !self.is_relevant(j) {
            return Err(FusionError::Precondition(format!("coordinate {j} is not relevant")));
        }
        self.fusion_sets
            .get(&j)
            .ok_or_else(|| FusionError::Config(format!("no fusion set for relevant coordinate {j}")))
    }

    pub fn in_fusion_set(&self, j: usize, s: usize) -> bool {
        self.fusion_sets.get(&j).is_some_and(|set| set.contains(&s))
    }

    pub fn class(&self, j: usize) -> ModelClass {
        self.model_class.get(&j).cloned().unwrap_or_default()
    }

    pub fn all_nonparametric(&self) -> bool {
        self.relevant.iter().all(|j| self.class(*j).is_nonparametric())
    }

    /// Structural violations of the spec itself.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |rule: String| out.push(Violation { record: None, rule });
        if self.d == 0 {
            push("d must be positive".into());
        }
        if self.k == 0 {
            push("k must be positive".into());
        }
        for &j in &self.relevant {
            if j == 0 || j > self.d {
                push(format!("relevant index {j} outside 1..{}", self.d));
            }
            match self.fusion_sets.get(&j) {
                None => push(format!("no fusion set for j={j}")),
                Some(set) if set.is_empty() => push(format!("empty fusion set at j={j}")),
                Some(set) => {
                    for &s in set {
                        if s == 0 || s > self.k {
                            push(format!("source {s} in fusion set j={j} outside 1..{}", self.k));
                        }
                    }
                }
            }
        }
        for &j in self.fusion_sets.keys() {
            if !self.relevant.contains(&j) {
                push(format!("fusion set given for irrelevant coordinate j={j}"));
            }
        }
        for (&j, class) in &self.model_class {
            if !self.relevant.contains(&j) {
                push(format!("model class given for irrelevant coordinate j={j}"));
            }
            match class {
                ModelClass::DagParents { parents } => {
                    if parents.iter().any(|&p| p == 0 || p >= j) {
                        push(format!("DAG parents at j={j} must be earlier coordinates"));
                    }
                }
                ModelClass::RepeatedMeasures { r } if *r < 2 => {
                    push(format!("repeated measures at j={j} needs r >= 2"));
                }
                ModelClass::Parametric { score } if score.dim == 0 => {
                    push(format!("parametric score at j={j} has dimension 0"));
                }
                _ => {}
            }
        }
        out
    }

    /// Whether `S_d ⊆ … ⊆ S_1` with `J = [d]`.
    pub fn is_nested(&self) -> bool {
        if self.relevant.len() != self.d {
            return false;
        }
        (2..=self.d).all(|j| match (self.fusion_sets.get(&j), self.fusion_sets.get(&(j - 1))) {
            (Some(a), Some(b)) => a.is_subset(b),
            _ => false,
        })
    }

    pub fn from_json(text: &str) -> Result<FusionSpec> {
        serde_json::from_str(text).map_err(|e| FusionError::Config(format!("fusion spec: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Real,
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// One rule violation; `record` is `None` for spec-level problems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub record: Option<usize>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.record {
            Some(i) => write!(f, "record {i}: {}", self.rule),
            None => write!(f, "spec: {}", self.rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedDataset {
    pub records: Vec<ObservationRecord>,
    pub spec: FusionSpec,
    pub columns: Vec<ColumnMeta>,
}

impl FusedDataset {
    pub fn new(records: Vec<ObservationRecord>, spec: FusionSpec) -> Self {
        let columns = (1..=spec.d).map(|j| ColumnMeta { name: format!("z{j}"), kind: ColumnKind::Real }).collect();
        FusedDataset { records, spec, columns }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.w).sum()
    }

    /// Same records under a different fusion spec.
    pub fn with_spec(&self, spec: FusionSpec) -> Self {
        FusedDataset { records: self.records.clone(), spec, columns: self.columns.clone() }
    }

    /// Indices of rows whose source lies in `S_j`.
    pub fn pooled_indices(&self, j: usize) -> Result<Vec<usize>> {
        let set = self.spec.fusion_set(j)?;
        Ok((0..self.records.len()).filter(|&i| set.contains(&self.records[i].s)).collect())
    }

    /// Weighted frequency of `S ∈ S_j`.
    pub fn source_prob(&self, j: usize) -> Result<f64> {
        let set = self.spec.fusion_set(j)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in &self.records {
            den += r.w;
            if set.contains(&r.s) {
                num += r.w;
            }
        }
        Ok(num / den)
    }

    /// Dense numeric view with `NaN` for missing slots.
    pub fn dense(&self) -> Dense {
        let d = self.spec.d;
        let mut z = Vec::with_capacity(self.len());
        let mut observed = Vec::with_capacity(self.len());
        for r in &self.records {
            let row: Vec<f64> = (1..=d).map(|j| r.get(j).unwrap_or(f64::NAN)).collect();
            observed.push(row.iter().take_while(|v| !v.is_nan()).count());
            z.push(row);
        }
        Dense {
            z,
            s: self.records.iter().map(|r| r.s).collect(),
            w: self.records.iter().map(|r| r.w).collect(),
            observed,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> FusedDataset {
        FusedDataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            spec: self.spec.clone(),
            columns: self.columns.clone(),
        }
    }
}

/// Row-major numeric copy of a dataset.
#[derive(Clone, Debug)]
pub struct Dense {
    pub z: Vec<Vec<f64>>,
    pub s: Vec<usize>,
    pub w: Vec<f64>,
    /// Number of leading non-missing coordinates per row.
    pub observed: Vec<usize>,
}

impl Dense {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn observed_through(&self, i: usize, j: usize) -> bool {
        self.observed[i] >= j
    }
}

/// Checks every structural invariant and lists the violations found.
pub fn validate(ds: &FusedDataset) -> Vec<Violation> {
    let spec = &ds.spec;
    let mut out = spec.violations();
    for (i, r) in ds.records.iter().enumerate() {
        let mut push = |rule: String| out.push(Violation { record: Some(i), rule });
        if r.z.len() != spec.d {
            push(format!("expected {} coordinates, found {}", spec.d, r.z.len()));
            continue;
        }
        if r.s == 0 || r.s > spec.k {
            push(format!("source {} outside 1..{}", r.s, spec.k));
        }
        if !(r.w.is_finite() && r.w >= 0.0) {
            push(format!("weight {} must be finite and nonnegative", r.w));
        }
        if r.z.iter().any(|v| matches!(v, Value::Real(x) if !x.is_finite())) {
            push("non-finite coordinate value".into());
        }
        for &j in &spec.relevant {
            if spec.in_fusion_set(j, r.s) && j <= spec.d && !r.observed_through(j) {
                push(format!("history missing at j={j}"));
            }
        }
    }
    let present: BTreeSet<usize> = ds.records.iter().map(|r| r.s).collect();
    let referenced: BTreeSet<usize> = spec.fusion_sets.values().flatten().copied().collect();
    for s in referenced {
        if !present.contains(&s) {
            out.push(Violation { record: None, rule: format!("no records for source {s}") });
        }
    }
    out
}

/// Rows with `s ∈ S_j`, order preserved.
pub fn pooled_rows(ds: &FusedDataset, j: usize) -> Result<FusedDataset> {
    Ok(ds.subset(&ds.pooled_indices(j)?))
}

fn is_missing_cell(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA" || c.eq_ignore_ascii_case("nan")
}

/// Reads `z1..zd, s[, w]` from CSV. Non-numeric columns become categorical with
/// codes assigned in sorted level order.
pub fn read_csv_from<R: std::io::Read>(reader: R, spec: FusionSpec) -> Result<FusedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut zcol = Vec::with_capacity(spec.d);
    for j in 1..=spec.d {
        zcol.push(find(&format!("z{j}")).ok_or_else(|| FusionError::Data(format!("missing column z{j}")))?);
    }
    let scol = find("s").ok_or_else(|| FusionError::Data("missing column s".into()))?;
    let wcol = find("w");
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    let mut columns = Vec::with_capacity(spec.d);
    for (j, &c) in zcol.iter().enumerate() {
        let numeric = rows.iter().all(|r| {
            let cell = r.get(c).unwrap_or("");
            is_missing_cell(cell) || cell.parse::<f64>().is_ok()
        });
        let kind = if numeric {
            ColumnKind::Real
        } else {
            let levels: BTreeSet<String> = rows
                .iter()
                .filter_map(|r| r.get(c))
                .filter(|cell| !is_missing_cell(cell))
                .map(str::to_string)
                .collect();
            ColumnKind::Categorical { levels: levels.into_iter().collect() }
        };
        columns.push(ColumnMeta { name: format!("z{}", j + 1), kind });
    }

    let mut records = Vec::with_capacity(rows.len());
    for (line, r) in rows.iter().enumerate() {
        let mut z = Vec::with_capacity(spec.d);
        for (j, &c) in zcol.iter().enumerate() {
            let cell = r.get(c).unwrap_or("");
            let v = if is_missing_cell(cell) {
                Value::Missing
            } else {
                match &columns[j].kind {
                    ColumnKind::Real => Value::real(cell.parse::<f64>().unwrap()),
                    ColumnKind::Categorical { levels } => {
                        Value::Cat(levels.iter().position(|l| l == cell).unwrap() as i64)
                    }
                }
            };
            z.push(v);
        }
        let s = r
            .get(scol)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| FusionError::Data(format!("row {}: bad source label", line + 1)))?;
        let w = match wcol.and_then(|c| r.get(c)) {
            Some(cell) if !is_missing_cell(cell) => cell
                .parse::<f64>()
                .map_err(|_| FusionError::Data(format!("row {}: bad weight", line + 1)))?,
            _ => 1.0,
        };
        records.push(ObservationRecord { z, s, w });
    }
    Ok(FusedDataset { records, spec, columns })
}

pub fn read_csv(path: &Path, spec: FusionSpec) -> Result<FusedDataset> {
    let f = std::fs::File::open(path)?;
    read_csv_from(f, spec)
}

/// Writes `z1..zd, s, w` with `NA` for missing cells.
pub fn write_csv<W: std::io::Write>(ds: &FusedDataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=ds.spec.d).map(|j| format!("z{j}")).collect();
    header.push("s".into());
    header.push("w".into());
    wtr.write_record(&header)?;
    for r in &ds.records {
        let mut row: Vec<String> = r
            .z
            .iter()
            .map(|v| match v {
                Value::Real(x) => format!("{x}"),
                Value::Cat(c) => c.to_string(),
                Value::Missing => "NA".into(),
            })
            .collect();
        row.push(r.s.to_string());
        row.push(format!("{}", r.w));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
