use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rebalancer")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn detect_reports_cycle_on_triangle() {
    let out = run(&["detect", path_str(&fixture("triangle.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let report = json(&out);
    assert_eq!(report["status"], "prone");
    assert_eq!(report["cycle"].as_array().unwrap().len(), 3);
    let gain: f64 = report["log_gain"].as_str().unwrap().parse().unwrap();
    assert!((gain - 27f64.ln()).abs() < 1e-9);
}

#[test]
fn detect_reports_unit_valuation_after_rebalancing() {
    let out = run(&["detect", path_str(&fixture("triangle_rebalanced.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["status"], "free");
    for token in ["EUR", "GBP", "USD"] {
        assert_eq!(report["valuation"][token], "1");
    }
}

#[test]
fn unreadable_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"version\": \"v1\", \"tokens\": [").unwrap();
    for cmd in ["detect", "rebalance", "trade-only"] {
        let out = run(&[cmd, path_str(&bad)]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(!out.stderr.is_empty());
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["detect", path_str(&missing)]).status.code(), Some(2));
    assert_eq!(run(&["detect"]).status.code(), Some(2));
    let out = run(&["rebalance", path_str(&fixture("triangle.json")), "--weights", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rebalance_triangle_reaches_four() {
    let out = run(&["rebalance", path_str(&fixture("triangle.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    for c in report["cfmms"].as_array().unwrap() {
        assert_eq!(c["liquidity_before"], "3");
        assert_eq!(c["liquidity_after"], "4");
    }
}

#[test]
fn rebalance_oracle_scenario() {
    let out = run(&["rebalance", path_str(&fixture("oracle_triangle.json")), "--restricted"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["mode"], "restricted");
    assert_eq!(report["cfmms"][0]["liquidity_after"], "5.14359353945");
}

#[test]
fn arbitrage_free_input_gives_empty_plan() {
    let out = run(&["rebalance", path_str(&fixture("triangle_rebalanced.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert_eq!(report["improvement"], "0");
    assert_eq!(report["status"], "no_improvement");
    assert!(report["plan"]["steps"].as_array().unwrap().is_empty());
}

#[test]
fn verify_accepts_solver_plans_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    for (name, restricted) in [("triangle.json", false), ("mixed_triangle.json", true), ("oracle_triangle.json", true)] {
        let scenario = fixture(name);
        let plan = dir.path().join(format!("{name}.plan"));
        let mut args = vec!["rebalance", path_str(&scenario), "--out", path_str(&plan)];
        if restricted {
            args.push("--restricted");
        }
        assert_eq!(run(&args).status.code(), Some(0));
        let out = run(&["verify", path_str(&scenario), path_str(&plan)]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stdout));
        assert_eq!(json(&out)["passed"], true);

        let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
        let step = &mut doc["steps"][0];
        let amount: f64 = step["amount"].as_str().unwrap().parse().unwrap();
        step["amount"] = Value::String(format!("{}", amount * 1.01));
        let tampered = dir.path().join(format!("{name}.tampered"));
        std::fs::write(&tampered, doc.to_string()).unwrap();
        let out = run(&["verify", path_str(&scenario), path_str(&tampered)]);
        assert_eq!(out.status.code(), Some(5), "{name}");
        let report = json(&out);
        let failing: Vec<&str> = report["checks"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|c| c["passed"] == false)
            .map(|c| c["name"].as_str().unwrap())
            .collect();
        assert!(!failing.is_empty());
        assert!(String::from_utf8_lossy(&out.stderr).contains(failing[0]));
    }
}

#[test]
fn verify_rejects_plan_for_another_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let out = run(&["plan", path_str(&fixture("triangle.json")), "--out", path_str(&plan)]);
    assert_eq!(out.status.code(), Some(0));
    for other in ["triangle_rebalanced.json", "oracle_triangle.json"] {
        let out = run(&["verify", path_str(&fixture(other)), path_str(&plan)]);
        assert_eq!(out.status.code(), Some(5), "{other}");
    }
    let wrong_size = dir.path().join("two.json");
    let gen = run(&["gen", "--seed", "4", "--cfmms", "2", "--tokens", "3", "--out", path_str(&wrong_size)]);
    assert_eq!(gen.status.code(), Some(0));
    assert_eq!(run(&["verify", path_str(&wrong_size), path_str(&plan)]).status.code(), Some(5));
}

#[test]
fn rebalance_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("gen.json");
    let gen = run(&["gen", "--seed", "11", "--cfmms", "7", "--tokens", "5", "--out", path_str(&scenario)]);
    assert_eq!(gen.status.code(), Some(0));
    assert_eq!(gen.stdout, std::fs::read(&scenario).unwrap());
    assert_eq!(gen.stdout, run(&["gen", "--seed", "11", "--cfmms", "7", "--tokens", "5"]).stdout);
    let a = run(&["rebalance", path_str(&scenario)]);
    let b = run(&["rebalance", path_str(&scenario)]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn trade_only_reports_uniform_withdrawal() {
    let out = run(&["trade-only", path_str(&fixture("triangle.json")), "--starts", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    for token in ["EUR", "GBP", "USD"] {
        let s: f64 = report["sigma"][token].as_str().unwrap().parse().unwrap();
        assert!((s - (4.0 - 2.0 * 3f64.sqrt())).abs() < 1e-9);
    }
}

#[test]
fn fee_mode_plan_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("fees.json");
    let args = [
        "gen", "--seed", "8", "--cfmms", "6", "--tokens", "4", "--active-fraction", "0.5", "--fee-min", "0.99",
        "--out", path_str(&scenario),
    ];
    assert_eq!(run(&args).status.code(), Some(0));
    let plan = dir.path().join("plan.json");
    let out = run(&["rebalance", path_str(&scenario), "--restricted", "--fees", "--out", path_str(&plan)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["fee_mode"], true);
    let out = run(&["verify", path_str(&scenario), path_str(&plan)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}
