use std::process::Command;

fn branchmc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchmc"))
}

fn run_ok(args: &[&str]) -> String {
    let out = branchmc().args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn lists_presets() {
    let out = run_ok(&["presets"]);
    assert!(out.lines().any(|l| l == "cosine-d5"));
    assert!(out.lines().any(|l| l == "ou3d-zsq015"));
}

#[test]
fn estimate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs.csv");
    let stdout = run_ok(&[
        "estimate", "--preset", "ou1d-burgers015", "--scheme", "d", "-n", "300", "-R", "3", "--ensemble", "20",
        "--seed", "4", "--out", out.to_str().unwrap(),
    ]);
    let printed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run,estimate,particles,seconds"));
    assert_eq!(lines.count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["mean"], printed["mean"]);
    assert_eq!(summary["scheme"], "d");
    assert_eq!(summary["preset"], "ou1d-burgers015");
}

#[test]
fn two_invocations_agree_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("r{i}.csv"))).collect();
    for p in &paths {
        run_ok(&["estimate", "--preset", "cosine-d5", "-n", "500", "-R", "4", "--seed", "9", "--shards", "3", "--out", p.to_str().unwrap()]);
    }
    let estimates = |p: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
    };
    assert_eq!(estimates(&paths[0]), estimates(&paths[1]));
}

#[test]
fn check_prints_report() {
    let out = run_ok(&["check", "--preset", "ou1d-burgers015", "-q", "3", "--kappa", "0.25"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["condition_i"]["holds"].is_boolean());
    assert_eq!(report["condition_ii"]["applicable"], true);
}

#[test]
fn study_single_rung() {
    let out = run_ok(&["study", "--preset", "cosine-d5", "--ladder", "200", "-R", "3"]);
    assert!(out.contains("# slope undefined"));
}

#[test]
fn config_file_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(
        &path,
        r#"{"dim": 1, "horizon": 1.0, "x0": [0.0], "drift": {"constant": [0.0]}, "volatility": [[1.0]],
            "terminal": {"constant": {"value": 0.0}}, "terms": [{"index": [0], "coefficient": 0.5}],
            "mode": "exact_constant"}"#,
    )
    .unwrap();
    let out = run_ok(&["estimate", "--config", path.to_str().unwrap(), "-n", "20000", "-R", "10"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    // a constant source c over [0, 1] with g = 0 gives u(0, x) = c
    let se = v["stderr"].as_f64().unwrap();
    assert!((v["mean"].as_f64().unwrap() - 0.5).abs() < 4.0 * se);
}

#[test]
fn rejects_bad_input() {
    let out = branchmc().args(["estimate", "--preset", "nope", "-n", "10", "-R", "2"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    let out = branchmc().args(["estimate", "--preset", "cosine-d5", "--scheme", "d", "-n", "10"]).output().unwrap();
    assert!(!out.status.success());
}
