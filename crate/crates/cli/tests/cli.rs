use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn simloss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simloss"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "dataset": {"n_classes": 8, "samples_per_subcluster": 10, "input_dim": 8},
  "batch": {"classes": 4, "per_class": 4},
  "train": {"total_iters": 40, "eval_interval": 20, "embed_dim": 4, "hidden_dim": 8,
            "eval": {"held_out_per_subcluster": 3}}
}"#;

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gradcheck_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = simloss(dir.path(), &["gradcheck", "--loss", "simce", "--loss", "L_m", "--trials", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["reports"].as_array().unwrap().len(), 2);
    assert_eq!(report["passed"], Value::Bool(true));
    let manifest = read_json(&dir.path().join("manifest_gradcheck.json"));
    assert_eq!(manifest["command"], "gradcheck");
    assert_eq!(manifest["passed"], Value::Bool(true));
    assert_eq!(manifest["artifacts"][0]["path"], "gradcheck.json");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simloss(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(simloss(dir.path(), &["gradcheck", "--loss", "hinge"]).status.code(), Some(1));

    let cfg = small_config(dir.path(), r#"{"loss": {"temperature": -1.0}}"#);
    let out = simloss(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let cfg = small_config(dir.path(), r#"{"batch": {"clases": 4}}"#);
    assert_eq!(simloss(dir.path(), &["--config", &cfg, "gen-data"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simloss(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#"{"dataset": {"n_classes": 8, "samples_per_subcluster": 10, "input_dim": 8},
            "batch": {"classes": 4, "per_class": 4},
            "train": {"total_iters": 200, "eval_interval": 100, "embed_dim": 4,
                      "optimizer": {"lr0": 1e12, "lr_min": 1e11},
                      "eval": {"held_out_per_subcluster": 3}}}"#,
    );
    let out = simloss(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL);
    let out = simloss(dir.path(), &["--config", &cfg, "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["curves.csv", "eval.csv", "sim_iter_0.csv", "sim_iter_20.csv", "sim_iter_40.csv", "model.json", "train.json"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("iter,loss,lr,n_non\n"));
    assert_eq!(curves.lines().count(), 41);
    let evals = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(evals.lines().count(), 4);
    let sim = std::fs::read_to_string(dir.path().join("sim_iter_0.csv")).unwrap();
    assert!(sim.starts_with("# kind=cosine B=16\n"));

    let out = simloss(dir.path(), &["--config", &cfg, "eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let geo = read_json(&dir.path().join("geometry.json"));
    let r1 = geo["rank1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));

    let model = dir.path().join("model.json");
    let out = simloss(
        dir.path(),
        &["--config", &cfg, "export-sim", "--kind", "cosine_over_max", "--model", model.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sim = std::fs::read_to_string(dir.path().join("sim_cosine_over_max.csv")).unwrap();
    assert!(sim.starts_with("# kind=cosine_over_max B=16\n"));
    assert_eq!(sim.lines().count(), 17);
}

#[test]
fn manifests_match_across_output_dirs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path(), SMALL);
    for dir in [a.path(), b.path()] {
        assert!(simloss(dir, &["--config", &cfg, "--seed", "7", "train"]).status.success());
    }
    for name in ["curves.csv", "eval.csv", "model.json", "train.json", "manifest_train.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    assert_eq!(read_json(&a.path().join("manifest_train.json"))["seed"], 7);
}

#[test]
fn gen_data_writes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), SMALL);
    assert!(simloss(dir.path(), &["--config", &cfg, "gen-data"]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    // 8 classes x 2 subclusters x 10 rows plus a header.
    assert_eq!(csv.lines().count(), 161);
}
