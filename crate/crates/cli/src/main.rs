use clap::{Args, Parser, Subcommand, ValueEnum};
use fusionest::data::{read_csv, validate, FusionSpec};
use fusionest::estimands::EstimandSpec;
use fusionest::onestep::{one_step, OneStepOptions};
use fusionest::simulate::dgp::Scenario;
use fusionest::simulate::monte_carlo::{run_monte_carlo, MetricTable, MonteCarloConfig};
use fusionest::simulate::toys::{make_discrete_toy, Toy, CATALOG};
use fusionest::verify::{check_catalog_with, CheckResult};
use fusionest::FusionError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_ASSERTION: u8 = 5;

/// Largest tolerated complete-over-no-fusion variance ratio under
/// `--assert-variance-ratio`.
const VARIANCE_RATIO_MAX: f64 = 0.95;

#[derive(Parser)]
#[command(name = "fusionest", version, about = "One-step estimation from fused data sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a functional from a CSV file and a fusion spec.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Also write per-row influence function values.
        #[arg(long)]
        if_csv: bool,
    },
    /// Run a Monte Carlo experiment on the longitudinal design.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Fail when a complete-fusion variance exceeds 0.95 times the
        /// no-fusion variance of the same model.
        #[arg(long)]
        assert_variance_ratio: bool,
    },
    /// Check gradients on the finite toy catalog.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Comma-separated catalog ids (default: the configured list or all).
        #[arg(long, value_delimiter = ',')]
        toys: Option<Vec<String>>,
        /// Replace the canonical gradient by a corrupted one in the pathwise
        /// check.
        #[arg(long)]
        inject_fault: bool,
        /// Write each toy as a JSON fixture.
        #[arg(long)]
        write_fixtures: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; falls back to FUSIONEST_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

/// Configuration file. Paths are relative to the file's directory; flags
/// override the corresponding fields.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    spec: Option<PathBuf>,
    out: Option<PathBuf>,
    estimand: Option<EstimandSpec>,
    options: Option<OneStepOptions>,
    seed: Option<u64>,
    reps: Option<usize>,
    threads: Option<usize>,
    format: Option<Format>,
    write_if: bool,
    preset: Option<String>,
    simulation: Option<MonteCarloConfig>,
    assert_variance_ratio: bool,
    toys: Option<Vec<String>>,
    toy_files: Vec<PathBuf>,
    n_scores: Option<usize>,
    inject_fault: bool,
    write_fixtures: bool,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        let code = match e {
            FusionError::Config(_) => EXIT_CONFIG,
            FusionError::Data(_) | FusionError::Precondition(_) | FusionError::Io(_) => EXIT_DATA,
            FusionError::Numerical(_) => EXIT_NUMERICAL,
            FusionError::Oracle(_) => EXIT_ASSERTION,
        };
        Failure::new(code, e.to_string())
    }
}

type Run<T> = Result<T, Failure>;

/// Loaded configuration with its hash and directory.
struct Loaded {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
}

fn load(path: &Path) -> Run<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| Failure::new(EXIT_CONFIG, format!("config {}: {e}", path.display())))?;
    let hash = Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { cfg, hash, dir })
}

impl Loaded {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

fn threads(flag: Option<usize>, cfg: Option<usize>) -> Run<usize> {
    if let Some(t) = flag {
        return Ok(t);
    }
    if let Ok(v) = std::env::var("FUSIONEST_THREADS") {
        return v.trim().parse().map_err(|_| Failure::new(EXIT_CONFIG, format!("FUSIONEST_THREADS must be an integer, got {v:?}")));
    }
    Ok(cfg.unwrap_or(0))
}

fn init_pool(n: usize) -> Run<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))
}

/// Creates the first unused `<out>/<mode>-NNN` directory; earlier runs are
/// never touched.
fn run_dir(out: &Path, mode: &str) -> Run<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot create {}: {e}", out.display())))?;
    for i in 1..10_000 {
        let d = out.join(format!("{mode}-{i:03}"));
        match std::fs::create_dir(&d) {
            Ok(()) => return Ok(d),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Failure::new(EXIT_CONFIG, format!("cannot create {}: {e}", d.display()))),
        }
    }
    Err(Failure::new(EXIT_CONFIG, format!("no free run directory under {}", out.display())))
}

fn write_new(path: &Path, text: &str) -> Run<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot create {}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: &'a str,
    config_sha256: &'a str,
    config: &'a RunConfig,
    seed: u64,
    reps: Option<usize>,
    threads: usize,
    fusionest_version: &'a str,
    files: Vec<String>,
}

fn finish(dir: &Path, mut m: Manifest, files: Vec<(String, String)>) -> Run<()> {
    for (name, text) in &files {
        write_new(&dir.join(name), text)?;
        m.files.push(name.clone());
    }
    let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    write_new(&dir.join("manifest.json"), &text)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn out_dir(common: &Common, ld: &Loaded) -> PathBuf {
    match (&common.out, &ld.cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => ld.resolve(o),
        (None, None) => PathBuf::from("fusionest-out"),
    }
}

fn to_json<T: Serialize>(v: &T) -> Run<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))
}

fn cmd_estimate(common: Common, if_csv: bool) -> Run<()> {
    let mut ld = load(&common.config)?;
    let t = threads(common.threads, ld.cfg.threads)?;
    init_pool(t)?;
    let spec_path = ld.cfg.spec.as_ref().map(|p| ld.resolve(p)).ok_or_else(|| Failure::new(EXIT_CONFIG, "estimate needs 'spec'"))?;
    let data_path = ld.cfg.data.as_ref().map(|p| ld.resolve(p)).ok_or_else(|| Failure::new(EXIT_CONFIG, "estimate needs 'data'"))?;
    let estimand = ld.cfg.estimand.clone().ok_or_else(|| Failure::new(EXIT_CONFIG, "estimate needs 'estimand'"))?;
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read spec {}: {e}", spec_path.display())))?;
    let spec = FusionSpec::from_json(&text)?;
    let bad = spec.violations();
    if !bad.is_empty() {
        let rules: Vec<String> = bad.iter().map(|v| v.rule.clone()).collect();
        return Err(Failure::new(EXIT_CONFIG, format!("invalid fusion spec: {}", rules.join("; "))));
    }
    let ds = read_csv(&data_path, spec).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", data_path.display())))?;
    let bad = validate(&ds);
    if !bad.is_empty() {
        let rules: Vec<String> = bad.iter().take(10).map(|v| match v.record {
            Some(r) => format!("record {r}: {}", v.rule),
            None => v.rule.clone(),
        }).collect();
        return Err(Failure::new(EXIT_DATA, format!("invalid data ({} problems): {}", bad.len(), rules.join("; "))));
    }
    let mut opts = ld.cfg.options.clone().unwrap_or_default();
    let seed = common.seed.or(ld.cfg.seed).unwrap_or(opts.nuisance.fold_seed);
    opts.nuisance.fold_seed = seed;
    ld.cfg.seed = Some(seed);
    let report = one_step(&ds, &estimand, &opts)?;
    for c in 0..report.estimate.len() {
        println!("{}[{c}] = {:.6} ± {:.6} (SE)", report.estimand, report.estimate[c], report.se[c]);
    }
    let write_if = if_csv || ld.cfg.write_if;
    let mut files = vec![("report.json".to_string(), report.to_json(write_if)?)];
    if common.format.or(ld.cfg.format) == Some(Format::Csv) {
        let mut s = String::from("component,estimate,se,lo,hi,level\n");
        for (c, ci) in report.ci.iter().enumerate() {
            let _ = writeln!(s, "{c},{},{},{},{},{}", report.estimate[c], report.se[c], ci.lo, ci.hi, ci.level);
        }
        files.push(("estimate.csv".into(), s));
    }
    if write_if {
        let mut buf = Vec::new();
        report.write_if_csv(&mut buf)?;
        files.push(("if_values.csv".into(), String::from_utf8_lossy(&buf).into_owned()));
    }
    let dir = run_dir(&out_dir(&common, &ld), "estimate")?;
    let m = Manifest { mode: "estimate", config_sha256: &ld.hash, config: &ld.cfg, seed, reps: None, threads: t, fusionest_version: env!("CARGO_PKG_VERSION"), files: vec![] };
    finish(&dir, m, files)
}

/// Models whose complete-fusion variance exceeds the allowed share of their
/// no-fusion variance.
fn variance_ratio_failures(table: &MetricTable) -> Vec<String> {
    let mut out = Vec::new();
    let mut models: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    for m in models {
        if let (Some(c), Some(n)) = (table.row(m, Scenario::Complete), table.row(m, Scenario::None)) {
            match (c.var, n.var) {
                (Some(vc), Some(vn)) if vc / vn <= VARIANCE_RATIO_MAX => {}
                (Some(vc), Some(vn)) => out.push(format!("{m}: complete/none variance ratio {:.3} > {VARIANCE_RATIO_MAX}", vc / vn)),
                _ => out.push(format!("{m}: variance undefined with fewer than two replications")),
            }
        }
    }
    out
}

fn cmd_simulate(common: Common, assert_ratio: bool) -> Run<()> {
    let mut ld = load(&common.config)?;
    let t = threads(common.threads, ld.cfg.threads)?;
    let mut mc = match (&ld.cfg.simulation, &ld.cfg.preset) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => MonteCarloConfig::preset(p)?,
        (None, None) => return Err(Failure::new(EXIT_CONFIG, "simulate needs 'preset' or 'simulation'")),
    };
    if let Some(s) = common.seed.or(ld.cfg.seed) {
        mc.seed = s;
    }
    if let Some(r) = common.reps.or(ld.cfg.reps) {
        mc.reps = r;
    }
    ld.cfg.seed = Some(mc.seed);
    ld.cfg.reps = Some(mc.reps);
    let table = run_monte_carlo(&mc, t)?;
    println!("truth {:.4} (MC SE {:.4}), {} replications, seed {}", table.truth, table.truth_se, table.reps, table.seed);
    println!("{:<14} {:<9} {:>9} {:>9} {:>7} {:>7}", "model", "scenario", "bias", "var", "cov%", "failed");
    for r in &table.rows {
        let var = r.var.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<14} {:<9} {:>9.4} {:>9} {:>7.1} {:>7}", r.model, r.scenario.name(), r.bias, var, r.coverage, r.failed);
    }
    let mut files = Vec::new();
    let fmt = common.format.or(ld.cfg.format);
    if fmt != Some(Format::Json) {
        files.push(("metrics.csv".to_string(), table.to_csv()?));
    }
    if fmt != Some(Format::Csv) {
        files.push(("metrics.json".to_string(), table.to_json()?));
    }
    let dir = run_dir(&out_dir(&common, &ld), "simulate")?;
    let m = Manifest { mode: "simulate", config_sha256: &ld.hash, config: &ld.cfg, seed: mc.seed, reps: Some(mc.reps), threads: t, fusionest_version: env!("CARGO_PKG_VERSION"), files: vec![] };
    finish(&dir, m, files)?;
    if !table.valid {
        return Err(Failure::new(EXIT_NUMERICAL, format!("run invalid: too many failed replications ({})", table.failures.join("; "))));
    }
    if assert_ratio || ld.cfg.assert_variance_ratio {
        let bad = variance_ratio_failures(&table);
        if !bad.is_empty() {
            return Err(Failure::new(EXIT_ASSERTION, bad.join("; ")));
        }
        println!("variance ratio assertion passed");
    }
    Ok(())
}

fn cmd_oracle(common: Common, toys_flag: Option<Vec<String>>, inject: bool, fixtures: bool) -> Run<()> {
    let mut ld = load(&common.config)?;
    let t = threads(common.threads, ld.cfg.threads)?;
    init_pool(t)?;
    let seed = common.seed.or(ld.cfg.seed).unwrap_or(0);
    ld.cfg.seed = Some(seed);
    let ids: Vec<String> = match toys_flag.or_else(|| ld.cfg.toys.clone()) {
        Some(v) => v.into_iter().filter(|s| !s.trim().is_empty()).collect(),
        None if ld.cfg.toy_files.is_empty() => CATALOG.iter().map(|s| s.to_string()).collect(),
        None => Vec::new(),
    };
    let mut toys: Vec<Toy> = Vec::new();
    for id in &ids {
        if !CATALOG.contains(&id.as_str()) {
            return Err(Failure::new(EXIT_CONFIG, format!("unknown toy '{id}'; catalog: {}", CATALOG.join(", "))));
        }
        toys.push(make_discrete_toy(id, seed)?);
    }
    for p in &ld.cfg.toy_files {
        let path = ld.resolve(p);
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
        toys.push(Toy::from_json(&text)?);
    }
    if toys.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "empty toy selection"));
    }
    let n_scores = ld.cfg.n_scores.unwrap_or(20);
    let inject = inject || ld.cfg.inject_fault;
    let checks = check_catalog_with(&toys, seed, n_scores, inject)?;
    let failed: Vec<&CheckResult> = checks.iter().filter(|c| !c.pass).collect();
    for c in &checks {
        let rel = if c.lower { ">" } else { "<" };
        println!("{} {:<12} {:<20} {:<32} {:.3e} {rel} {:.0e}", if c.pass { "PASS" } else { "FAIL" }, c.toy, c.estimand, c.check, c.value, c.bound);
    }
    let mut files = Vec::new();
    let fmt = common.format.or(ld.cfg.format);
    if fmt != Some(Format::Json) {
        let mut s = String::from("toy,estimand,check,value,bound,lower,pass\n");
        for c in &checks {
            let _ = writeln!(s, "{},{},{},{:e},{:e},{},{}", c.toy, c.estimand, c.check, c.value, c.bound, c.lower, c.pass);
        }
        files.push(("oracle.csv".to_string(), s));
    }
    if fmt != Some(Format::Csv) {
        files.push(("oracle.json".to_string(), to_json(&checks)?));
    }
    if fixtures || ld.cfg.write_fixtures {
        for toy in &toys {
            files.push((format!("toy-{}.json", toy.id), toy.to_json()?));
        }
    }
    let dir = run_dir(&out_dir(&common, &ld), "oracle")?;
    let m = Manifest { mode: "oracle", config_sha256: &ld.hash, config: &ld.cfg, seed, reps: None, threads: t, fusionest_version: env!("CARGO_PKG_VERSION"), files: vec![] };
    finish(&dir, m, files)?;
    println!("{} checks, {} failed", checks.len(), failed.len());
    if !failed.is_empty() {
        return Err(Failure::new(EXIT_ASSERTION, format!("{} oracle checks failed", failed.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Estimate { common, if_csv } => cmd_estimate(common, if_csv),
        Command::Simulate { common, assert_variance_ratio } => cmd_simulate(common, assert_variance_ratio),
        Command::Oracle { common, toys, inject_fault, write_fixtures } => cmd_oracle(common, toys, inject_fault, write_fixtures),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
