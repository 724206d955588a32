//! End-to-end runs of the `recurflow` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use recurflow::corrector::CorrectorField;
use recurflow::fields::VectorField;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recurflow")).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with("{\"error\"")).expect("JSON error line on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn corrector_eval_matches_library() {
    let o = run(&["corrector", "eval", "--field", "shear_sin", "--x", "1,0", "--alpha", "1", "--p", "0.75"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    let c = CorrectorField::with_defaults(VectorField::shear_sin(), 0.75, 1.0).unwrap();
    let w = c.eval(&[1.0, 0.0]).unwrap();
    let div = c.div_exact(&[1.0, 0.0], &w).unwrap();
    assert_eq!(v["W"][0].as_f64().unwrap(), w[0]);
    assert_eq!(v["W"][1].as_f64().unwrap(), w[1]);
    assert_eq!(v["div_exact"].as_f64().unwrap(), div);
}

#[test]
fn discrete_cycle_returns_every_twelve_steps() {
    let o = run(&["recur", "discrete", "--perm", "cycle:12", "--U", "0", "--horizon", "60"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    let events: Vec<u64> = v["return_events"].as_array().unwrap().iter().map(|e| e.as_u64().unwrap()).collect();
    assert_eq!(events, vec![12, 24, 36, 48, 60]);
}

#[test]
fn usage_errors_exit_two_with_json() {
    let o = run(&["corrector", "eval", "--x", "1,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["kind"], "usage");
    let o = run(&["flow", "--field", "zero", "--x", "0,0", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = run(&["recur", "discrete", "--perm", "spiral:3", "--U", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let o = run(&["corrector", "eval", "--field", "shear_sin", "--x", "100,0", "--working-radius", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "config");
}

#[test]
fn flow_writes_csv_with_header() {
    let o = run(&["flow", "--field", "constant:1,2", "--x", "-1,0", "--time", "2", "--step", "0.5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,x1,x2");
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[5], "2.0,1.0,4.0");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn manifest_replays_bit_identically_at_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let args = ["drift", "--field", "taylor_green", "--scales", "1,2.5", "--seed", "9"];
    let o = run(&[&args[..], &["--out", a.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0));
    let manifest = a.join("manifest.json");
    let m: Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "drift");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["scales"][1], 2.5);
    let o = run(&["drift", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&[&args[..], &["--threads", "1", "--out", c.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0));
    for name in ["drift.csv", "drift.json"] {
        assert_eq!(read(&a, name), read(&b, name));
        assert_eq!(read(&a, name), read(&c, name));
    }
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"field": "constant:1,0", "x": [0, 0], "time": 3, "step": 1}"#).unwrap();
    let o = run(&["flow", "--config", cfg.to_str().unwrap(), "--time", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().last().unwrap(), "1.0,1.0,0.0");
    fs::write(&cfg, r#"{"field": "zero", "x": [0, 0], "tiem": 3}"#).unwrap();
    let o = run(&["flow", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plan_then_verify_and_detect_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"field": "zero", "x0": [0, 0], "y0": [1, 0], "delta": 0.3, "arrival_tol": 0.01}"#).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["control", "plan", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let plan: Value = serde_json::from_slice(&read(&out, "plan.json")).unwrap();
    assert_eq!(plan["result"]["status"], "REACHED");
    assert_eq!(plan["result"]["schedule"]["values"][0][0], 0.25);
    assert_eq!(plan["result"]["schedule"]["breakpoints"][1], 4.0);
    assert!(out.join("trajectory.csv").exists());

    let result = out.join("plan.json");
    let o = run(&["control", "verify", "--result", result.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["pass"], true);

    let mut tampered = plan.clone();
    tampered["result"]["schedule"]["values"][0][1] = Value::from(0.01);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, serde_json::to_vec(&tampered).unwrap()).unwrap();
    let o = run(&["control", "verify", "--result", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["pass"], false);
}

#[test]
fn fields_lists_builtins() {
    let o = run(&["fields"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert!(v["builtins"].as_array().unwrap().iter().any(|n| n == "taylor_green"));
    let o = run(&["fields", "--field", "taylor_green", "--x", "0.3,0.2"]);
    let v = stdout_json(&o);
    assert_eq!(v["incompressible"], true);
    assert!(v["divergence_fd"].as_f64().unwrap().abs() < 1e-8);
}
