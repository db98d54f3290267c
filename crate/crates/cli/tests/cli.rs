use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
replications = 2
ensemble_m = 2
eval_doses = 3
eval_patients = 15

[dgp]
n_patients = 120
dim_d = 3

[gps]
num_basis_j = 10

[gps.net]
epochs = 2

[outcome]
epochs = 2

[recommend]
n_levels = 4
n_draws = 4
state_bins = 3

[recommend.rl]
iters = 2
sweeps = 2

[grid]
variance_v = [1.0]
dim_d = []
overlap_eta = []
n_patients = []
history_h = []

[continuous]
n_patients = 200
replications = 1
eval_doses = 3
eval_patients = 40
num_basis_j = 8

[continuous.net]
epochs = 2
"#;

fn deepsdrf(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_deepsdrf"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--threads")
        .arg("1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_fit_estimate_recommend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim_dir = d.join("sim");
    ok(&deepsdrf(d, &["simulate", "--out-dir", sim_dir.to_str().unwrap()]));
    let cohort = sim_dir.join("cohort.csv");
    let text = fs::read_to_string(&cohort).unwrap();
    assert!(text.lines().count() > 120);

    let models = d.join("models");
    ok(&deepsdrf(d, &["fit", "--data", cohort.to_str().unwrap(), "--out-dir", models.to_str().unwrap()]));
    for f in ["gps.json", "deepsdrf.json", "snn.json"] {
        assert!(models.join(f).exists(), "{f}");
    }

    let est = d.join("est");
    ok(&deepsdrf(
        d,
        &[
            "estimate",
            "--models",
            models.to_str().unwrap(),
            "--data",
            cohort.to_str().unwrap(),
            "--doses",
            "0.1,0.3",
            "--patients",
            "4",
            "--out-dir",
            est.to_str().unwrap(),
        ],
    ));
    let curves: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(est.join("cadr.json")).unwrap()).unwrap();
    assert_eq!(curves.len(), 8);
    assert!(est.join("cadr.csv").exists());

    let rec = d.join("rec");
    ok(&deepsdrf(
        d,
        &[
            "recommend",
            "--models",
            models.to_str().unwrap(),
            "--data",
            cohort.to_str().unwrap(),
            "--model",
            "snn",
            "--patients",
            "10",
            "--out-dir",
            rec.to_str().unwrap(),
        ],
    ));
    let text = fs::read_to_string(rec.join("recommendations.csv")).unwrap();
    assert!(text.starts_with("patient_id,method,original_dose,recommended_dose,r_value,flags\n"));
    assert_eq!(text.lines().count(), 1 + 20);
}

#[test]
fn evaluate_writes_json_and_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    ok(&deepsdrf(dir.path(), &["evaluate", "--recommend", "--seed", "9", "--out-dir", out.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"][0]["scenario"]["seed"], 9);
    assert_eq!(report["scenarios"][0]["failed"], false);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scenario,config_hash,model,band,metric,mean,ci_lo,ci_hi\n"));
    assert!(out.join("survival_curves.csv").exists());
    assert!(out.join("recommendations.csv").exists());
}

#[test]
fn benchmark_covers_the_grid_and_continuous_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&deepsdrf(dir.path(), &["benchmark", "--continuous", "--out-dir", out.to_str().unwrap()]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"].as_array().unwrap().len(), 2);
    let cont: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("continuous.json")).unwrap()).unwrap();
    assert_eq!(cont["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "replications = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_deepsdrf"))
        .args(["simulate", "--config", bad.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = deepsdrf(dir.path(), &["estimate", "--models", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failed_scenario_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.toml");
    fs::write(&cfg, TINY.replace("[gps.net]\nepochs = 2", "[gps.net]\nepochs = 2\nlearning_rate = 1e300")).unwrap();
    let out_dir = dir.path().join("eval");
    let out = Command::new(env!("CARGO_BIN_EXE_deepsdrf"))
        .args(["evaluate", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()])
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"][0]["failed"], true);
    assert_eq!(report["scenarios"][0]["replications_ok"], 0);
}
