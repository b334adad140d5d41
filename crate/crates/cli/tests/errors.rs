//! Exit codes and the JSON error shape on stderr.

use std::path::Path;
use std::process::{Command, Output};

fn drgrade(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drgrade"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn drgrade")
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {line}"))
}

#[test]
fn missing_manifest_is_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = drgrade(&["split", "--manifest", "/nonexistent/m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "validation");
}

#[test]
fn wrong_vector_length_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = drgrade(&["synth-manifest", "--counts", "1,2,3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("5"));
}

#[test]
fn bad_ratios_rejected_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = drgrade(&["synth-manifest", "--counts", "20,20,20,20,20"], dir.path());
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let split_dir = dir.path().join("split");
    let o = drgrade(
        &["split", "--manifest", dir.path().join("manifest.csv").to_str().unwrap(), "--ratios", "0.5,0.5,0.5"],
        &split_dir,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!split_dir.join("train.csv").exists());
}

#[test]
fn diverging_training_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    assert!(drgrade(&["synth-manifest", "--counts", "8,8,8,8,8"], dir.path()).status.success());
    let s = drgrade(&["synth", "--manifest", &p("manifest.csv"), "--dim", "8"], dir.path());
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let o = drgrade(
        &[
            "train", "--train", &p("manifest.csv"), "--val", &p("manifest.csv"),
            "--embeddings", &p("embeddings.gfe"), "--lr", "1e308", "--epochs", "3", "--patience", "2",
        ],
        &dir.path().join("run"),
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"]["kind"], "runtime");
}
