use std::path::Path;
use std::process::{Command, Output};

fn dreamcatcher(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dreamcatcher"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn synth(dir: &Path, questions: &str) -> String {
    let out = dreamcatcher(&["synth", "--out", dir.to_str().unwrap(), "--questions", questions, "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("config.json").to_str().unwrap().to_string()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dreamcatcher(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(dreamcatcher(&["label", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
    assert_eq!(dreamcatcher(&["--help"]).status.code(), Some(0));
}

#[test]
fn validate_flags_a_missing_generation() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "20");
    assert_eq!(dreamcatcher(&["validate", "--config", &config]).status.code(), Some(0));

    let gens = dir.path().join("generations.jsonl");
    let text = std::fs::read_to_string(&gens).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&gens, kept.join("\n") + "\n").unwrap();
    let out = dreamcatcher(&["validate", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/validation.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = report["findings"].as_array().unwrap().iter().map(|f| f["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"k_violation"), "{kinds:?}");
}

#[test]
fn label_partitions_questions_and_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "30");
    for cmd in ["score", "label"] {
        let out = dreamcatcher(&[cmd, "--config", &config]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    let categories = lines(&out.join("categories.jsonl"));
    let skipped = lines(&out.join("skipped.jsonl"));
    assert_eq!(categories.len() + skipped.len(), 30);
    assert_eq!(lines(&out.join("labels.jsonl")).len(), 5 * categories.len());
    let pairs = lines(&out.join("pairs.jsonl"));
    assert!(!pairs.is_empty());
    assert!(out.join("agreement.json").exists());
}

#[test]
fn report_summarizes_stage_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "30");
    for cmd in ["score", "label", "report"] {
        let out = dreamcatcher(&[cmd, "--config", &config]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let md = std::fs::read_to_string(dir.path().join("out/summary.md")).unwrap();
    for row in ["Known", "Unknown", "Mixed", "Total"] {
        assert!(md.contains(row), "{md}");
    }
}
