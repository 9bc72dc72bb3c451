//! Command-line behaviour: happy paths and error reporting.

use std::path::Path;
use std::process::{Command, Output};

fn greenlist(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_greenlist"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = greenlist(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn detect_report_has_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["keygen", "--vocab", "1000", "--seed", "1", "--out", "k.toml"]);
    ok(d, &["generate", "--model", "uniform:1000", "--key", "k.toml", "--n", "200", "--seed", "2", "--out", "w.txt"]);
    ok(d, &["detect", "--key", "k.toml", "--in", "w.txt", "--report", "r.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    for field in ["scheme", "n", "green_count", "gamma", "z", "tau", "alpha", "decision", "stats", "certified_eta"] {
        assert!(report.get(field).is_some(), "missing {field}");
    }
    assert_eq!(report["decision"], 1);
    assert_eq!(report["n"], 200);
}

#[test]
fn certify_defaults_to_the_z_unit_bound() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["keygen", "--vocab", "1000", "--seed", "1", "--out", "k.toml"]);
    ok(d, &["generate", "--model", "uniform:1000", "--key", "k.toml", "--n", "200", "--seed", "2", "--out", "w.txt"]);
    let normalized: serde_json::Value = serde_json::from_str(&ok(d, &["certify", "--key", "k.toml", "--in", "w.txt", "--tau", "6"])).unwrap();
    let stated: serde_json::Value =
        serde_json::from_str(&ok(d, &["certify", "--key", "k.toml", "--in", "w.txt", "--tau", "6", "--bound", "stated"])).unwrap();
    assert_eq!(normalized["bound"], "normalized");
    assert!(stated["certified_eta"].as_u64() > normalized["certified_eta"].as_u64());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: &[&[&str]] = &[
        &["keygen", "--vocab", "1000", "--gamma", "1.5", "--seed", "1", "--out", "k.toml"],
        &["detect", "--key", "missing.toml", "--in", "x.txt", "--report", "r.json"],
        &["generate", "--model", "zipf:3", "--n", "5", "--seed", "1", "--out", "o.txt"],
        &["generate", "--model", "uniform:10", "--n", "5", "--decoding", "topp:1.5", "--seed", "1", "--out", "o.txt"],
        &["attack", "--in", "x.txt", "--eta", "1", "--mix", "ins:0.5", "--seed", "1", "--out", "o.txt"],
        &["quality-check", "--delta", "1", "--alphas", "a,b"],
    ];
    for args in cases {
        let out = greenlist(d, args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn tokens_out_of_vocabulary_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["keygen", "--vocab", "10", "--seed", "1", "--out", "k.toml"]);
    std::fs::write(d.join("x.txt"), "1\n2\n10\n").unwrap();
    let out = greenlist(d, &["detect", "--key", "k.toml", "--in", "x.txt", "--report", "r.json"]);
    assert!(!out.status.success());
}

#[test]
fn tokenize_reuses_a_saved_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.txt"), "to be or not to be").unwrap();
    std::fs::write(d.join("b.txt"), "to see or not").unwrap();
    ok(d, &["tokenize", "--in", "a.txt", "--vocab", "v.txt", "--grow", "--out", "a.tok"]);
    ok(d, &["tokenize", "--in", "b.txt", "--vocab", "v.txt", "--out", "b.tok"]);
    assert_eq!(std::fs::read_to_string(d.join("a.tok")).unwrap(), "1\n2\n3\n4\n1\n2\n");
    assert_eq!(std::fs::read_to_string(d.join("b.tok")).unwrap(), "1\n0\n3\n4\n");
    let out = greenlist(d, &["tokenize", "--in", "a.txt", "--vocab", "none.txt", "--out", "c.tok"]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.toml"),
        "experiment = \"type1\"\nmodel = \"uniform:200\"\nschemes = [\"fixed-split\"]\ngamma = 0.5\ndelta = 2.0\nn = 50\ntrials = 20\nalphas = [0.01]\nseed = 3\n",
    )
    .unwrap();
    ok(d, &["evaluate", "--config", "c.toml", "--out", "r.json", "--csv", "t.csv"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert!(report["version"].as_str().unwrap().starts_with('v'));
    assert_eq!(report["arms"][0]["detected_at_tau"]["trials"], 20);
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}
