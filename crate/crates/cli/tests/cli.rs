use std::io::Write;
use std::process::{Command, Output};

fn mnar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnar"))
        .args(args)
        .env_remove("MNAR_SEED")
        .output()
        .expect("run mnar")
}

fn write_csv(content: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(content.as_bytes()).unwrap();
    f
}

#[test]
fn simulate_deterministic_json() {
    let args = [
        "simulate", "--scenario", "A", "--n", "200", "--reps", "3", "--methods",
        "unadj,gpsw", "--seed", "11", "--boot", "10",
    ];
    let a = mnar(&args);
    let b = mnar(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout, "same invocation must be byte-identical");
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 11);
    assert_eq!(v["report"]["methods"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_rejects_nonpara_on_scenario_b() {
    let out = mnar(&["simulate", "--scenario", "B", "--methods", "nonpara", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("p <= 3"), "unexpected message: {msg}");
}

#[test]
fn simulate_requires_seed() {
    let out = mnar(&["simulate", "--scenario", "A", "--reps", "2", "--methods", "unadj"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_fallback() {
    let out = Command::new(env!("CARGO_BIN_EXE_mnar"))
        .args(["simulate", "--scenario", "A", "--n", "100", "--reps", "2", "--methods",
            "unadj", "--boot", "0"])
        .env("MNAR_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 42);
}

#[test]
fn config_file_with_flag_override() {
    let cfg = write_csv(r#"{"scenario": "A", "n": 100, "reps": 2, "boot": 0, "seed": 5, "methods": "unadj"}"#);
    let path = cfg.path().to_str().unwrap().to_string();
    let out = mnar(&["simulate", "--config", &path, "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 9, "flag must override the file");
    assert_eq!(v["config"]["n"], 100);
}

#[test]
fn config_unknown_key_rejected() {
    let cfg = write_csv(r#"{"scenario": "A", "seed": 5, "bogus": 1}"#);
    let path = cfg.path().to_str().unwrap().to_string();
    let out = mnar(&["simulate", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn estimate_unadjusted_hand_computed() {
    let f = write_csv("a,y,x1\n0,1.0,0.5\n0,2.0,\n1,4.0,1.5\n1,5.0,0.5\n");
    let path = f.path().to_str().unwrap().to_string();
    let out = mnar(&["estimate", "--data", &path, "--method", "unadj", "--boot", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // (4 + 5)/2 - (1 + 2)/2 = 3
    assert!((v["result"]["estimate"].as_f64().unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn estimate_missing_outcome_column() {
    let f = write_csv("a,z,x1\n0,1,2\n");
    let path = f.path().to_str().unwrap().to_string();
    let out = mnar(&["estimate", "--data", &path, "--method", "unadj"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn estimate_missing_file_is_usage_error() {
    let out = mnar(&["estimate", "--data", "/definitely/not/here.csv", "--method", "unadj"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identify_rejects_continuous_columns() {
    let mut rows = String::from("a,y,x1\n");
    for i in 0..50 {
        rows.push_str(&format!("{},{},{}.{:02}\n", i % 2, i % 3, i, i));
    }
    let f = write_csv(&rows);
    let path = f.path().to_str().unwrap().to_string();
    let out = mnar(&["identify", "--data", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("continuous"));
}

#[test]
fn identify_reports_on_discrete_data() {
    // deterministic discrete table with dependence between x and y
    let mut rows = String::from("a,y,x1\n");
    for i in 0..400 {
        let a = i % 2;
        let x = (i / 2) % 2;
        let y = (x + (i / 4) % 2) % 3;
        let cell = if i % 5 == 0 { String::new() } else { x.to_string() };
        rows.push_str(&format!("{a},{y},{cell}\n"));
    }
    let f = write_csv(&rows);
    let path = f.path().to_str().unwrap().to_string();
    let out = mnar(&["identify", "--data", &path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["identifiability"]["identifiable"].is_boolean());
    assert_eq!(v["identifiability"]["q"], 2);
}

#[test]
fn table_format_has_header() {
    let out = mnar(&["simulate", "--scenario", "A", "--n", "100", "--reps", "2",
        "--methods", "unadj", "--seed", "1", "--boot", "0", "--format", "table"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("bias"), "table output: {text}");
}
