use std::path::Path;
use std::process::{Command, Output};

fn fbn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbn")).args(args).current_dir(dir).output().expect("run fbn")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbn(&["gen-data", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbn(&["gen-data", "--config", "nope.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn pipeline_from_data_to_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"samples_per_class": 24, "height": 8, "width": 8}"#).unwrap();
    let j = stdout_json(&fbn(&["gen-data", "--config", "spec.json", "--out", "data/"], d));
    assert_eq!(j["samples"], 96);
    assert!(d.join("data/dataset.fbnd").exists() && d.join("data/splits.json").exists());

    let space = r#""space": {"image_size": 8, "channels": 4, "stages": 2}"#;
    std::fs::write(
        d.join("sn.json"),
        format!(r#"{{"dataset": "data", {space}, "train": {{"epochs": 2, "batch_size": 8, "lr": 0.5, "sampling": "round_robin"}}}}"#),
    )
    .unwrap();
    stdout_json(&fbn(&["train-supernet", "--config", "sn.json", "--out", "sn.fbns", "--seed", "1"], d));
    assert!(d.join("sn.fbns").exists() && d.join("sn.fbns.json").exists() && d.join("sn.fbns.run.json").exists());

    let archs = r#"["000000", "111111", "012301", "333333", "101010", "444440"]"#;
    let ind = r#""indicators": {"passes": 2, "calibration_size": 8, "batch_size": 8, "recalibration_batches": 1}"#;
    std::fs::write(d.join("score.json"), format!(r#"{{"dataset": "data", "checkpoint": "sn.fbns", "archs": {archs}, {ind}}}"#)).unwrap();
    let j = stdout_json(&fbn(&["score", "--config", "score.json", "--out", "s.csv"], d));
    assert_eq!(j["n"], 6);
    let header = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(header.starts_with("arch,gamma,expressivity,trainability,uncertainty,rank_e,rank_t,rank_u,cpi_rank"));

    let mut truth = String::from("arch,val_accuracy,test_accuracy,seed,content_hash\n");
    for (i, a) in ["000000", "111111", "012301", "333333", "101010", "444440"].iter().enumerate() {
        truth += &format!("{a},0.5,{},0,x\n", 0.3 + 0.1 * i as f64);
    }
    std::fs::write(d.join("t.csv"), truth).unwrap();
    let j = stdout_json(&fbn(&["correlate", "--scores", "s.csv", "--truth", "t.csv"], d));
    assert_eq!(j["n"], 6);
    let tau = j["kendall_tau"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&tau));
    assert!(j["spearman_rho"].is_number());

    std::fs::write(
        d.join("st.json"),
        format!(r#"{{"dataset": "data", {space}, "arch": "010101", "train": {{"mode": "full", "epochs": 1}}}}"#),
    )
    .unwrap();
    let j = stdout_json(&fbn(&["standalone", "--config", "st.json"], d));
    assert_eq!(j["arch"], "010101");
    assert!(j["test_accuracy"].as_f64().is_some());

    std::fs::write(
        d.join("search.json"),
        format!(r#"{{"dataset": "data", "checkpoint": "sn.fbns", {ind}, "search": {{"population_size": 4, "parent_count": 2, "generations": 1}}}}"#),
    )
    .unwrap();
    stdout_json(&fbn(&["search", "--config", "search.json", "--out", "search"], d));
    let hist = std::fs::read_to_string(d.join("search/history.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "generation,best_arch,best_rank,median_rank");
}

#[test]
fn ntk_and_experiment_emit_drift_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ntk = r#"{"base": {"depth": 2, "widths": [3, 8, 1]}, "widths": [8, 16], "seeds": 2, "steps": 2, "num_inputs": 4}"#;
    std::fs::write(d.join("ntk.json"), ntk).unwrap();
    stdout_json(&fbn(&["ntk", "--config", "ntk.json", "--out", "drift.csv"], d));
    let text = std::fs::read_to_string(d.join("drift.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "width,seed,steps,drift,init_limit_relerr");
    assert_eq!(text.lines().count(), 5);

    std::fs::write(d.join("e.json"), format!(r#"{{"kind": "ntk_sweep", "out_dir": "exp", "ntk": {ntk}}}"#)).unwrap();
    let a = stdout_json(&fbn(&["experiment", "--config", "e.json"], d));
    assert!(d.join("exp/drift.csv").exists() && d.join("exp/summary.json").exists());
    let b = stdout_json(&fbn(&["experiment", "--config", "e.json", "--out", "exp2"], d));
    assert_eq!(a["content_hash"], b["content_hash"]);
    let c = stdout_json(&fbn(&["experiment", "--config", "e.json", "--out", "exp3", "--seed", "5"], d));
    assert_ne!(a["content_hash"], c["content_hash"]);
}
