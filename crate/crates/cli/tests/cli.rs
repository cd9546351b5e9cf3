use std::path::Path;
use std::process::{Command, Output};

fn sbgc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbgc"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{"data": {"n_train_per_class": 20, "n_test_per_class": 5}, "experiments": {"eval_samples": 15}}"#;

#[test]
fn overrides_land_in_the_stamped_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = sbgc(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--seed", "42", "--sde", "subvp", "--trace", "hutchinson", "--probes", "7", "gen-data"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = json(&tmp.path().join("config.json"));
    assert_eq!(c["seed"], 42);
    assert_eq!(c["sde"]["kind"], "subvp");
    assert_eq!(c["trace"]["mode"], "hutchinson");
    assert_eq!(c["trace"]["n_probes"], 7);
    assert_eq!(c["train"]["seed"], 42);
    let summary = json(&tmp.path().join("data_summary.json"));
    assert_eq!(summary["seed"], 42);
    assert!(summary["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn analytic_model_classifies_near_bayes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    assert!(sbgc(tmp.path(), &["--config", c, "gen-data"]).status.success());
    let out = sbgc(tmp.path(), &["--config", c, "classify", "--model", "analytic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&tmp.path().join("classify_summary.json"));
    let r = &s["results"];
    let (acc, bayes) = (r["accuracy"].as_f64().unwrap(), r["bayes_accuracy"].as_f64().unwrap());
    assert!((acc - bayes).abs() <= 1.0 / 15.0 + 1e-12, "{acc} vs {bayes}");
    let lines = std::fs::read_to_string(tmp.path().join("classify.ndjson")).unwrap();
    assert_eq!(lines.lines().count(), 15);
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sbgc(tmp.path(), &["classify", "--data", "/nonexistent/test.sbgc", "--model", "analytic"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = sbgc(tmp.path(), &["--config", "/nonexistent.json", "gen-data"]);
    assert!(!out.status.success());
}
