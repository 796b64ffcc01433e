use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn vfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfc")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unit_interval_completes_to_a_half_line() {
    let dir = tempfile::tempdir().unwrap();
    let input =
        write(dir.path(), "i.json", r#"{"polytope": {"dim": 1, "constraints": [{"a": [1], "b": "0", "strict": false}, {"a": [-1], "b": "-1", "strict": false}]}, "point": ["0"]}"#);
    let out = vfc(&["complete-polytope", &input]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    let cs = v["completion"]["constraints"].as_array().unwrap();
    assert_eq!(cs.len(), 1);
    assert_eq!(cs[0]["a"], serde_json::json!([1]));
    assert_eq!(cs[0]["b"], "0");
    assert_eq!(v["complete"], true);
    assert_eq!(v["bounded"], false);
}

#[test]
fn check_on_dbar_z_passes_and_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = vfc(&["check", "dbar_z", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v, json_of(&out));
    assert_eq!(v["pass"], true);
    assert_eq!(v["version"], 1);
    let counts = v["suites"].as_array().unwrap().iter().find(|s| s["suite"] == "counts").unwrap();
    let c = &counts["checks"][0];
    assert!((c["lhs"].as_f64().unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn reports_are_byte_identical() {
    let a = vfc(&["check", "two_chart_circle", "--seed", "3", "--suite", "partition", "--suite", "stokes"]);
    let b = vfc(&["check", "two_chart_circle", "--seed", "3", "--suite", "partition", "--suite", "stokes"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn malformed_scenario_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.json", r#"{"version": 1, "charts": [{"name": "c"}]"#);
    let out = vfc(&["check", &p]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SCHEMA"));
    let out = vfc(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn a_failed_check_exits_one() {
    let out = vfc(&["check", "two_chart_circle", "--suite", "partition", "--tol", "1e-15"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_of(&out)["pass"], false);
}

#[test]
fn no_transverse_perturbation_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(&String::from_utf8(vfc(&["fixtures", "dbar_z"]).stdout).unwrap()).unwrap();
    v["options"]["force_perturbation"] = true.into();
    v["options"]["max_attempts"] = 0.into();
    let p = write(dir.path(), "s.json", &v.to_string());
    let out = vfc(&["vclass", &p]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NO_TRANSVERSE_FOUND"));
}

#[test]
fn integrate_and_pushforward_report_values() {
    let out = vfc(&["integrate", "dbar_zbar"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert!((v["integrals"][0]["integral"].as_f64().unwrap() + 1.0).abs() < 1e-8);

    let out = vfc(&["pushforward", "dbar_z", "--samples", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["samples"].as_array().unwrap().len(), 3);
    assert_eq!(v["degree"], 1);

    let out = vfc(&["vclass", "z2_equivariant"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json_of(&out)["dim"], 0);
}

#[test]
fn fixtures_are_listed() {
    let v = json_of(&vfc(&["fixtures"]));
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|n| n.as_str().unwrap()).collect();
    assert!(names.contains(&"dbar_z") && names.contains(&"product"));
}
