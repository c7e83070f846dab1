use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn coplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("coplan-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn plan_reports_the_step_count_and_writes_the_plan() {
    let dir = scratch("plan");
    let out = dir.join("plan.json");
    let o = coplan(&["plan", "--domain", "oddvar", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(stdout(&o), "545 steps\n");
    assert!(String::from_utf8_lossy(&o.stderr).contains("planning time"));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["steps"].as_array().unwrap().len(), 545);
    assert!(doc["tree"].is_object());
}

#[test]
fn plan_accepts_a_domain_file() {
    let dir = scratch("file");
    let path = dir.join("micro.htn");
    fs::write(&path, coplan_core::lang::bundled_source("hand_over_micro").unwrap()).unwrap();
    let o = coplan(&["plan", "--domain", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(stdout(&o), "8 steps\n");
}

#[test]
fn simulate_is_deterministic() {
    let dir = scratch("sim");
    let a = dir.join("a.ndjson");
    let b = dir.join("b.ndjson");
    for p in [&a, &b] {
        let o = coplan(&[
            "simulate",
            "--domain",
            "kritter",
            "--seed",
            "7",
            "--policy",
            "compliant",
            "--log",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{o:?}");
    }
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn metrics_output_is_stable_and_exported() {
    let dir = scratch("metrics");
    let log = dir.join("run.ndjson");
    let csv = dir.join("out");
    let o = coplan(&["simulate", "--domain", "ragrund", "--seed", "3", "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let args = ["metrics", "--log", log.to_str().unwrap(), "--csv", csv.to_str().unwrap()];
    let first = coplan(&args);
    assert_eq!(first.status.code(), Some(0), "{first:?}");
    assert_eq!(stdout(&first), stdout(&coplan(&args)));
    assert!(stdout(&first).contains("h_idle"));
    let fluency = fs::read_to_string(csv.join("fluency.csv")).unwrap();
    assert!(fluency.starts_with("h_idle,r_idle,f_del,c_act\n"));
    assert_eq!(fluency.lines().count(), 2);
    assert!(csv.join("perception_timing.csv").exists());
}

#[test]
fn metrics_on_an_empty_log_fails() {
    let dir = scratch("empty");
    let log = dir.join("run.ndjson");
    fs::write(&log, "").unwrap();
    let o = coplan(&["metrics", "--log", log.to_str().unwrap(), "--csv", dir.join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(coplan(&["plan", "--domain", "oddvar", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(coplan(&[]).status.code(), Some(2));
    assert_eq!(coplan(&["simulate", "--domain", "oddvar", "--policy", "lazy"]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_one() {
    assert_eq!(coplan(&["plan", "--domain", "/nonexistent/x.htn"]).status.code(), Some(1));
    assert_eq!(coplan(&["metrics", "--log", "/nonexistent/run.ndjson"]).status.code(), Some(1));
}

#[test]
fn serve_rejects_a_bad_speed() {
    let o = coplan(&["serve", "--domain", "hand_over_micro", "--port", "0", "--speed", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
