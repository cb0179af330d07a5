use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FATIGUE_QUERY: &str = "Why do I keep feeling fatigued even after sleeping well?";

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn mirage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirage")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8(bytes.to_vec()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn kg_stats_on_toy_graph() {
    let out = mirage(&["kg", "stats", s(&fixture("fatigue/graph.tsv"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).starts_with("entities\t18\ntriples\t26\nrelations\t7\n"));
}

#[test]
fn kg_validate_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "A\tr\tB\nonly two\tfields\n").unwrap();
    let out = mirage(&["kg", "validate", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("line 2"));
}

#[test]
fn ask_prints_answer_and_writes_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = mirage(&[
        "ask",
        "--query",
        FATIGUE_QUERY,
        "--config",
        s(&fixture("fatigue/run.toml")),
        "--audit-out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("Based on your symptoms"));
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ask.json")).unwrap()).unwrap();
    assert_eq!(audit["query"], FATIGUE_QUERY);
    assert_eq!(audit["chains"].as_array().unwrap().len(), 2);
    assert_eq!(audit["config"]["pipeline"]["chain"]["tau"], 0.7);
}

#[test]
fn replay_reports_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("fatigue/run.toml");
    let ask = mirage(&["ask", "--query", FATIGUE_QUERY, "--config", s(&cfg), "--audit-out", s(dir.path())]);
    assert_eq!(ask.status.code(), Some(0));
    let out = mirage(&["replay", "--audit", s(&dir.path().join("ask.json"))]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "MATCH\n");
}

#[test]
fn replay_detects_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("fatigue/run.toml");
    mirage(&["ask", "--query", FATIGUE_QUERY, "--config", s(&cfg), "--audit-out", s(dir.path())]);
    let mut audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ask.json")).unwrap()).unwrap();
    // without recorded sub-answers every chain fails on rerun
    for chain in audit["chains"].as_array_mut().unwrap() {
        chain["answer"] = serde_json::Value::Null;
    }
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, audit.to_string()).unwrap();
    let out = mirage(&["replay", "--audit", s(&tampered)]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("MISMATCH\nrecorded: Based on your symptoms"), "{stdout}");
    assert!(stdout.contains("replayed: <none>"));
}

#[test]
fn batch_continues_past_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = mirage(&[
        "batch",
        "--input",
        s(&fixture("batch/jobs.jsonl")),
        "--config",
        s(&fixture("batch/run.toml")),
        "--out",
        s(dir.path()),
        "--jobs",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("fatigue\tok"));
    assert!(stdout.contains("broken\tfailed"));
    assert!(dir.path().join("fatigue.json").exists());
    // a failed job still leaves its partial audit
    let broken: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("broken.json")).unwrap()).unwrap();
    assert!(broken["final_answer"].is_null());
    assert_eq!(broken["chains"][0]["status"], "failed");
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = mirage(&[
        "ask",
        "--query",
        FATIGUE_QUERY,
        "--config",
        s(&fixture("fatigue/run.toml")),
        "--audit-out",
        s(dir.path()),
        "--n-r",
        "1",
        "--tau",
        "0.9",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ask.json")).unwrap()).unwrap();
    assert_eq!(audit["config"]["pipeline"]["chain"]["n_r"], 1);
    assert_eq!(audit["config"]["pipeline"]["chain"]["tau"], 0.9);
    for chain in audit["chains"].as_array().unwrap() {
        assert_eq!(chain["retrieval_count"], 1);
        assert_eq!(chain["turns"][1]["injected_result"], "<|KG_RESULT_BEGIN|>\nmax_limit_reached\n<|KG_RESULT_END|>");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mirage(&[]).status.code(), Some(2));
    assert_eq!(mirage(&["ask", "--config", "x.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[backend]\nkind = \"http\"\n").unwrap();
    let out = mirage(&["ask", "--query", "q", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("graph.path") && err.contains("backend.endpoint") && err.contains("backend.model"), "{err}");
}
