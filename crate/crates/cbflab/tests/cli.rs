//! Binary-level contract tests: exit codes, determinism of the verdict
//! fields, stream discipline, and the CSV export surface.

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cbflab");

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("failed to spawn the cbflab binary")
}

fn run_fixture(cmd: &str, name: &str, extra: &[&str]) -> Output {
    let cfg = fixture(name);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

/// Nulls every wall-time field so two reports can be compared bytewise.
fn strip_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                if k == "wall_time_s" || k == "total_wall_time_s" {
                    *val = Value::Null;
                } else {
                    strip_times(val);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_times),
        _ => {}
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    // Clean completion.
    let out = run_fixture("euler", "unit_disk.cfg", &[]);
    assert_eq!(out.status.code(), Some(0));
    // A Violated verdict.
    let out = run_fixture("brockett", "nonholonomic.cfg", &[]);
    assert_eq!(out.status.code(), Some(2));
    // Errors (here: a missing config file) are 1, never 2.
    let out = run(&["euler", "--config", "/nonexistent/path.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    // Usage errors are also 1: codes above 1 are reserved for verdicts.
    let out = run(&["no-such-command", "--config", "x"]);
    assert_eq!(out.status.code(), Some(1));
    // Help is not an error.
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn stdout_is_the_report_and_stderr_the_progress() {
    let out = run_fixture("euler", "unit_disk.cfg", &[]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let report: Value = serde_json::from_str(&stdout).expect("stdout is one JSON document");
    assert_eq!(report["command"], "euler");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("verdict: Completed"), "stderr: {stderr}");
    assert!(stderr.contains("seed 0"), "stderr: {stderr}");
}

#[test]
fn reports_are_deterministic_for_a_fixed_seed() {
    let runs: Vec<Value> = (0..2)
        .map(|_| {
            let out = run_fixture("all", "unit_disk.cfg", &["--seed", "7"]);
            assert_eq!(out.status.code(), Some(0));
            serde_json::from_slice(&out.stdout).expect("report JSON")
        })
        .collect();
    let mut a = runs[0].clone();
    let mut b = runs[1].clone();
    strip_times(&mut a);
    strip_times(&mut b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap(),
        "verdict fields changed between identical runs"
    );
    assert_eq!(a["seed"], 7);
}

#[test]
fn validation_errors_name_the_offending_field() {
    let dir = std::env::temp_dir().join("cbflab-cli-validation");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.cfg");
    std::fs::write(
        &path,
        r#"
[system]
kind = "affine"
n = 2
m = 2
inputs = [["1", "0"], ["0", "u3"]]
input_set = { kind = "full" }
"#,
    )
    .unwrap();
    let out = run(&["obstruct-t3", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.contains("system.inputs"),
        "error does not point at the field: {stderr}"
    );
    assert!(stderr.contains("u3"), "error does not name the variable: {stderr}");
}

#[test]
fn resolution_and_seed_overrides_land_in_the_report() {
    let out = run_fixture(
        "euler",
        "unit_disk.cfg",
        &["--resolution", "32", "--seed", "9"],
    );
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["resolution"], 32);
    assert_eq!(report["seed"], 9);
    assert_eq!(
        report["results"][0]["data"]["resolution"], 32,
        "the complex was not rebuilt at the override"
    );
}

#[test]
fn csv_exports_are_written() {
    let dir = std::env::temp_dir().join("cbflab-cli-csv");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let out = run_fixture(
        "euler",
        "unit_disk.cfg",
        &["--csv-dir", dir.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.join("euler.csv")).expect("euler.csv exists");
    assert!(csv.starts_with("dimension,count\n"), "csv: {csv}");
    assert_eq!(csv.trim().lines().count(), 4, "header plus one row per dimension");
}

#[test]
fn the_all_command_reports_every_step() {
    let out = run_fixture("all", "unit_disk_fullspace.cfg", &[]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report["results"].as_array().unwrap();
    assert_eq!(rows.len(), 9, "one row per narrative command");
    for row in rows {
        assert!(row["step"].is_string(), "row without a step label: {row}");
    }
    // Commands whose inputs are not configured are skipped, not errors.
    let skipped: Vec<&str> = rows
        .iter()
        .filter(|r| r["outcome"] == "Skipped")
        .map(|r| r["command"].as_str().unwrap())
        .collect();
    assert!(skipped.contains(&"brockett"), "skipped: {skipped:?}");
    assert_eq!(report["verdict"], "NotViolated");
}
