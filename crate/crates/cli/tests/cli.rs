use fusionest::estimands::LongitudinalModel;
use fusionest::simulate::dgp::Scenario;
use fusionest::simulate::monte_carlo::MonteCarloConfig;
use serde_json::{json, Value};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fusionest"));
    c.env_remove("FUSIONEST_THREADS");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mean_csv(dir: &Path) -> Vec<f64> {
    let y: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 * 0.5 - 1.0).collect();
    let mut s = String::from("z1,s\n");
    for v in &y {
        s.push_str(&format!("{v},1\n"));
    }
    write(dir, "data.csv", &s);
    y
}

fn mean_config(dir: &Path, spec: Value) {
    write(dir, "spec.json", &spec.to_string());
    let cfg = json!({
        "data": "data.csv",
        "spec": "spec.json",
        "out": "out",
        "estimand": { "estimand": "z_estimation", "family": { "kind": "mean", "outcome": 1 } }
    });
    write(dir, "config.json", &cfg.to_string());
}

fn single_spec() -> Value {
    json!({ "d": 1, "k": 1, "J": [1], "fusion_sets": { "1": [1] } })
}

#[test]
fn estimate_mean_matches_column_mean_and_keeps_earlier_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let y = mean_csv(dir);
    mean_config(dir, single_spec());
    let o = run(&["estimate", "--config", "config.json", "--format", "csv", "--if-csv"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let run1 = dir.join("out/estimate-001");
    let first = std::fs::read_to_string(run1.join("report.json")).unwrap();
    let report: Value = serde_json::from_str(&first).unwrap();
    let est = report["estimate"][0].as_f64().unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((est - mean).abs() < 1e-12, "{est} vs {mean}");
    assert!(run1.join("estimate.csv").exists());
    let ifs = std::fs::read_to_string(run1.join("if_values.csv")).unwrap();
    assert_eq!(ifs.lines().count(), y.len() + 1);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "estimate");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let o = run(&["estimate", "--config", "config.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("out/estimate-002/report.json").exists());
    assert_eq!(std::fs::read_to_string(run1.join("report.json")).unwrap(), first);
}

#[test]
fn empty_fusion_set_is_a_config_error_naming_the_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    mean_csv(dir);
    mean_config(dir, json!({ "d": 1, "k": 1, "J": [1], "fusion_sets": { "1": [] } }));
    let o = run(&["estimate", "--config", "config.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty fusion set at j=1"), "{}", stderr(&o));
    assert!(!dir.join("out").exists());
}

#[test]
fn data_problems_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "data.csv", "z2,s\n1,1\n2,1\n");
    mean_config(dir, single_spec());
    let o = run(&["estimate", "--config", "config.json"], dir);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing column z1"));
}

#[test]
fn config_problems_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "config.json", "{ \"unknown_field\": 1 }");
    assert_eq!(run(&["estimate", "--config", "config.json"], dir).status.code(), Some(2));
    assert_eq!(run(&["estimate", "--config", "absent.json"], dir).status.code(), Some(2));
    mean_csv(dir);
    mean_config(dir, single_spec());
    let o = bin().args(["estimate", "--config", "config.json"]).current_dir(dir).env("FUSIONEST_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("FUSIONEST_THREADS"));
}

fn oracle_config(dir: &Path, extra: Value) {
    let mut cfg = json!({ "out": "out", "n_scores": 3, "seed": 4 });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    write(dir, "oracle.json", &cfg.to_string());
}

#[test]
fn oracle_passes_and_detects_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    oracle_config(dir, json!({ "toys": ["nested", "itt"] }));
    let o = run(&["oracle", "--config", "oracle.json", "--write-fixtures", "--threads", "1"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let run1 = dir.join("out/oracle-001");
    let csv = std::fs::read_to_string(run1.join("oracle.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(run1.join("toy-itt.json").exists());

    oracle_config(dir, json!({ "toy_files": ["out/oracle-001/toy-itt.json"] }));
    let o = run(&["oracle", "--config", "oracle.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&["oracle", "--config", "oracle.json", "--toys", "itt", "--inject-fault"], dir);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn oracle_rejects_empty_and_unknown_selections() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    oracle_config(dir, json!({ "toys": [] }));
    let o = run(&["oracle", "--config", "oracle.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty toy selection"));
    oracle_config(dir, json!({ "toys": ["nope"] }));
    let o = run(&["oracle", "--config", "oracle.json"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown toy"));
}

fn small_simulation() -> MonteCarloConfig {
    let mut mc = MonteCarloConfig::table1();
    mc.dgp = mc.dgp.scaled(0.1);
    mc.scenarios = vec![Scenario::None, Scenario::Complete];
    mc.models = vec![LongitudinalModel::Nonparametric];
    mc.truth = Some((10.0, 0.0));
    mc
}

#[test]
fn simulate_writes_metrics_and_is_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = json!({ "out": "out", "simulation": serde_json::to_value(small_simulation()).unwrap() });
    write(dir, "sim.json", &cfg.to_string());
    for threads in ["1", "2"] {
        let o = run(&["simulate", "--config", "sim.json", "--reps", "3", "--seed", "5", "--threads", threads], dir);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("nonparametric"));
    }
    let a = std::fs::read_to_string(dir.join("out/simulate-001/metrics.json")).unwrap();
    let b = std::fs::read_to_string(dir.join("out/simulate-002/metrics.json")).unwrap();
    assert_eq!(a, b);
    let csv = std::fs::read_to_string(dir.join("out/simulate-001/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let table: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(table["reps"], 3);
    assert_eq!(table["seed"], 5);
}

#[test]
fn simulate_needs_a_preset_or_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "sim.json", "{}");
    assert_eq!(run(&["simulate", "--config", "sim.json"], dir).status.code(), Some(2));
    write(dir, "sim.json", "{ \"preset\": \"table9\" }");
    assert_eq!(run(&["simulate", "--config", "sim.json"], dir).status.code(), Some(2));
}

#[test]
fn single_replication_cannot_pass_the_variance_assertion() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = json!({ "out": "out", "simulation": serde_json::to_value(small_simulation()).unwrap() });
    write(dir, "sim.json", &cfg.to_string());
    let o = run(&["simulate", "--config", "sim.json", "--reps", "1", "--threads", "1", "--assert-variance-ratio"], dir);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("fewer than two replications"));
}
