use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tgcrf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgcrf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SYNTH: &str = "\
n_nodes = 12
n_timesteps = 40
seed = 4
communities = 3
homophily = 0.8
ar1 = 0.1
community_spread = 3
";

const EXPERIMENT: &str = "\
dataset = data/dataset.csv
similarity = common-history
history = 3
window = 12
test_months = 3
train_snapshots = 4
lags = 1,2
families = lr,gp
gp_grid = 3
models = gcrf,ugcrf,ufgcrf
";

fn synth_dataset(dir: &Path) {
    fs::write(dir.join("synth.cfg"), SYNTH).unwrap();
    let o = tgcrf(&["synth", "--config", "synth.cfg", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = tgcrf(&["run", "--config", "nowhere/exp.cfg", "--out", "res"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("nowhere/exp.cfg"), "{err}");
    assert!(err.contains("config:"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tgcrf(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(tgcrf(&["run", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(tgcrf(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn overlapping_windows_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    let cfg = format!("{EXPERIMENT}refit = once\ntrain_end = 39\n");
    fs::write(dir.path().join("exp.cfg"), cfg).unwrap();
    let o = tgcrf(&["run", "--config", "exp.cfg", "--out", "res"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("config:") && err.contains("overlaps"), "{err}");
    assert!(!dir.path().join("res").exists());
}

#[test]
fn graph_builds_similarity_and_variogram() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    let o = tgcrf(
        &["graph", "--input", "data/dataset.csv", "--kind", "common-history", "--h", "3", "--out", "g"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sim = fs::read_to_string(dir.path().join("g/similarity.txt")).unwrap();
    assert!(sim.starts_with("tgcrf-similarity 1"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g/variogram.json")).unwrap()).unwrap();
    assert!(v["bins"].as_array().is_some_and(|b| !b.is_empty()));
    assert!(v["verdict"] == "good" || v["verdict"] == "bad");
}

#[test]
fn comorbidity_graph_from_records() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    fs::write(dir.path().join("records.txt"), "n00,n01\nn00,n01,n02\nn03\nn02,n04\n").unwrap();
    let o = tgcrf(
        &["graph", "--input", "data/dataset.csv", "--kind", "comorbidity", "--records", "records.txt", "--out", "g"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(dir.path().join("bad.txt"), "n00,zz\n").unwrap();
    let o = tgcrf(
        &["graph", "--input", "data/dataset.csv", "--kind", "comorbidity", "--records", "bad.txt", "--out", "g"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("graph:"), "{}", stderr(&o));
}

#[test]
fn ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    let o = tgcrf(&["ingest", "--input", "data/dataset.csv", "--out", "copy"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("data/dataset.csv")).unwrap(),
        fs::read(dir.path().join("copy/dataset.csv")).unwrap()
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 nodes, 40 timesteps"));
}

#[test]
fn run_then_evaluate_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    fs::write(dir.path().join("exp.cfg"), EXPERIMENT).unwrap();
    let o = tgcrf(&["run", "--config", "exp.cfg", "--seed", "3", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let res = dir.path().join("res");
    for f in ["manifest.txt", "config.cfg", "reports/report.json", "reports/rmse.csv", "predictions/gcrf_lr.csv"] {
        assert!(res.join(f).exists(), "{f} missing");
    }
    assert!(!res.join("INCOMPLETE").exists());
    assert!(fs::read_to_string(res.join("config.cfg")).unwrap().contains("seed = 3"));

    let o = tgcrf(&["evaluate", "--predictions", "res/predictions", "--out", "again"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(res.join("reports/report.json")).unwrap(),
        fs::read(dir.path().join("again/reports/report.json")).unwrap()
    );
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path());
    fs::write(dir.path().join("exp.cfg"), EXPERIMENT).unwrap();
    let o = tgcrf(&["train", "--config", "exp.cfg", "--out", "trained"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("trained/models/ufgcrf_gp.txt").exists());
    let o = tgcrf(&["predict", "--config", "exp.cfg", "--models", "trained", "--out", "fc"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("fc/forecast.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tgcrf-forecast 1"));
    assert_eq!(lines.next(), Some("model,node,mean,variance"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6 * 12);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert!(f[3].parse::<f64>().unwrap() > 0.0);
    }
}
