use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures(set: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(set)
}

fn docstruct(out: &Path, args: &[&str]) -> Output {
    let config = fixtures("e2e").join("pipeline.toml");
    Command::new(env!("CARGO_BIN_EXE_docstruct"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const QUESTION: &str = "Who is the CEO of Cobalt Health?";

#[test]
fn stages_one_at_a_time_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let staged = dir.path().join("staged");
    assert!(stdout(&docstruct(&staged, &["ingest"])).contains("6 documents, 6 chunks"));
    stdout(&docstruct(&staged, &["discover", "--query", QUESTION]));
    assert!(stdout(&docstruct(&staged, &["extract"])).contains("10 candidate tuples"));
    assert!(stdout(&docstruct(&staged, &["validate"])).contains("0 violations"));
    assert!(stdout(&docstruct(&staged, &["commit"])).contains("10 committed"));
    let csv = stdout(&docstruct(&staged, &["query", "--sql", "SELECT name FROM Person WHERE role = 'CFO'"]));
    assert_eq!(csv, "name\r\nEmil Novak\r\n");
    let answered = stdout(&docstruct(&staged, &["answer", "--query", QUESTION]));

    let full = stdout(&docstruct(&dir.path().join("full"), &["run", "--query", QUESTION]));
    assert_eq!(answered, full);
    assert!(full.starts_with("Dara Singh\n"));
    assert!(full.contains("[d6:0:Person:0]"));
    for file in ["answer.json", "provenance.json", "result.csv", "query.sql", "manifest.json", "calls.json"] {
        assert!(dir.path().join("full").join(file).exists(), "{file}");
    }
}

#[test]
fn unrecorded_question_fails_with_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = docstruct(dir.path(), &["run", "--query", "What is not in the replay file?"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: discover:"), "{err}");
    assert!(err.contains("no fixture for digest"), "{err}");
}

#[test]
fn flags_are_checked_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let o = docstruct(dir.path(), &["--alpha", "1.5", "run", "--query", QUESTION]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha must lie in (0, 1)"));
    let o = docstruct(dir.path(), &["--no-schema-discovery", "run", "--query", QUESTION]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_schema_discovery requires a schema file"));
}

#[test]
fn eval_scores_the_adversarial_set_per_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let adversarial = fixtures("adversarial");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_docstruct"))
            .arg("--out-dir")
            .arg(&out)
            .args(extra)
            .arg("eval")
            .arg(&adversarial)
            .output()
            .unwrap();
        stdout(&o);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        report["overall"]["correct"].as_u64().unwrap()
    };
    assert_eq!(run("full", &[]), 6);
    assert_eq!(run("no-clear", &["--no-clear"]), 1);
    assert_eq!(run("passive", &["--discovery-mode", "passive"]), 5);
}
