use std::fs;
use std::path::Path;
use std::process::Command;

#[test]
fn authoring_reproduces_the_bundled_fixtures() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_author-fixtures"))
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for set in ["e2e", "adversarial"] {
        for file in ["corpus.jsonl", "constraints.json", "fixtures.jsonl", "pipeline.toml", "replay.jsonl"] {
            let fresh = fs::read_to_string(out.path().join(set).join(file)).unwrap();
            let kept = fs::read_to_string(bundled.join(set).join(file)).unwrap();
            assert!(fresh == kept, "{set}/{file} is stale; rerun author-fixtures");
        }
    }
}
