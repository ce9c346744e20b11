use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const ARTIFACTS: [&str; 7] = [
    "selection_trace.csv",
    "balance.csv",
    "pair_tables.csv",
    "estimates.json",
    "sensitivity.json",
    "outcome_summary.csv",
    "summary.txt",
];

fn crd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crd")).args(args).output().expect("spawn crd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn generate(dir: &Path) -> String {
    let o = crd(&["generate", "--out", dir.to_str().unwrap(), "--n", "3000", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("config.json").to_str().unwrap().to_string()
}

fn edit_config(path: &str, out: &Path, f: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    let dest = Path::new(path).with_file_name(out);
    fs::write(&dest, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    dest.to_str().unwrap().to_string()
}

#[test]
fn generate_writes_data_truth_and_config() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    for f in ["data.csv", "ground_truth.json", "config.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let header = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert!(header.starts_with("unit_id,grade_lowest"));
}

#[test]
fn pipeline_emits_bundle_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = generate(dir.path());
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = crd(&["pipeline", "--config", &config, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for f in ARTIFACTS {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert!(!a.join("FAILED").exists());
    for f in ["estimates.json", "sensitivity.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
        let v: Value = serde_json::from_slice(&fs::read(a.join(f)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1);
    }
}

#[test]
fn stages_compose_like_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate(dir.path());
    let config = edit_config(&base, Path::new("weighted.json"), |v| {
        v["weighting"] = serde_json::json!({});
    });
    let staged = dir.path().join("staged");
    let s = staged.to_str().unwrap();
    for stage in ["select", "match", "weigh", "estimate", "sensitivity"] {
        let o = crd(&[stage, "--config", &config, "--out", s]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let whole = dir.path().join("whole");
    assert_eq!(code(&crd(&["pipeline", "--config", &config, "--out", whole.to_str().unwrap()])), 0);
    for f in ["estimates.json", "sensitivity.json", "selection_trace.csv", "pair_tables.csv"] {
        assert_eq!(fs::read(staged.join(f)).unwrap(), fs::read(whole.join(f)).unwrap(), "{f} differs");
    }
    let est: Value = serde_json::from_slice(&fs::read(whole.join("estimates.json")).unwrap()).unwrap();
    let methods: Vec<&str> = est["outcomes"][0]["estimates"].as_array().unwrap().iter().map(|e| e["method"].as_str().unwrap()).collect();
    assert!(methods.contains(&"raw") && methods.contains(&"ram"), "{methods:?}");
}

#[test]
fn invalid_inputs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate(dir.path());
    let missing = edit_config(&base, Path::new("missing.json"), |v| {
        v["columns"]["balance"][0] = "no_such_column".into();
    });
    let out = dir.path().join("out_missing");
    let o = crd(&["pipeline", "--config", &missing, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_column"));
    assert!(!out.exists());

    let out = dir.path().join("out_pstar");
    let o = crd(&["select", "--config", &base, "--out", out.to_str().unwrap(), "--p-star", "1.5"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    assert_eq!(code(&crd(&["pipeline", "--config", broken.to_str().unwrap()])), 2);
}

#[test]
fn stage_failure_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let base = generate(dir.path());
    let config = edit_config(&base, Path::new("target.json"), |v| {
        v["generalization"] = serde_json::json!({ "target": [{ "column": "grade_average", "max": 0.5 }] });
    });
    let out = dir.path().join("out");
    let o = crd(&["pipeline", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 9, "{}", String::from_utf8_lossy(&o.stderr));
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.starts_with("stage: generalize"), "{marker}");
    for f in ["selection_trace.csv", "balance.csv", "estimates.json", "sensitivity.json", "summary.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let o = crd(&["estimate", "--config", &base, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(code(&o), 7);
    assert!(dir.path().join("empty").join("FAILED").is_file());
}
