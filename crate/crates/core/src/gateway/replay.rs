use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Provider, ProviderCall, ProviderError, ReplyTable, Role};

/// One line of a replay fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// A JSON reply, or a string holding the raw reply text verbatim.
    pub reply: Value,
}

impl FixtureRecord {
    fn raw(&self) -> String {
        reply_text(&self.reply)
    }
}

fn reply_text(reply: &Value) -> String {
    match reply {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Look replies up by request digest.
    #[default]
    Digest,
    /// Serve replies in file order, ignoring digests. Only meaningful with a
    /// gateway capped at one in-flight call.
    Ordered,
}

/// Serves recorded replies.
pub struct ReplayProvider {
    mode: ReplayMode,
    by_digest: BTreeMap<String, FixtureRecord>,
    queue: Mutex<VecDeque<FixtureRecord>>,
}

impl ReplayProvider {
    pub fn new(records: Vec<FixtureRecord>, mode: ReplayMode) -> Result<Self, String> {
        let mut by_digest = BTreeMap::new();
        for r in &records {
            if by_digest.insert(r.digest.clone(), r.clone()).is_some() {
                return Err(format!("duplicate fixture digest {}", r.digest));
            }
        }
        Ok(Self {
            mode,
            by_digest,
            queue: Mutex::new(records.into()),
        })
    }

    pub fn from_table(table: ReplyTable) -> Self {
        let records = table
            .into_iter()
            .map(|(digest, reply)| FixtureRecord {
                digest,
                role: None,
                template: None,
                reply,
            })
            .collect();
        Self::new(records, ReplayMode::Digest).expect("map keys are unique")
    }

    pub fn load_jsonl(path: &Path, mode: ReplayMode) -> Result<Self, String> {
        let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
            records.push(record);
        }
        Self::new(records, mode)
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.by_digest.contains_key(digest)
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        match self.mode {
            ReplayMode::Digest => self
                .by_digest
                .get(&call.digest)
                .map(FixtureRecord::raw)
                .ok_or_else(|| ProviderError::NoFixture(call.digest.clone())),
            ReplayMode::Ordered => self
                .queue
                .lock()
                .expect("queue lock")
                .pop_front()
                .map(|r| r.raw())
                .ok_or_else(|| ProviderError::NoFixture(call.digest.clone())),
        }
    }
}

/// Wraps a provider and keeps every successful reply as a fixture record.
pub struct RecordingProvider {
    inner: Arc<dyn Provider>,
    records: Mutex<BTreeMap<String, FixtureRecord>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn Provider>) -> Self {
        Self {
            inner,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.records.lock().expect("records lock").values().cloned().collect()
    }

    /// Writes records sorted by digest, merged with any records already in
    /// the file.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<usize> {
        let mut merged: BTreeMap<String, FixtureRecord> = BTreeMap::new();
        if path.exists() {
            if let Ok(existing) = ReplayProvider::load_jsonl(path, ReplayMode::Digest) {
                merged.extend(existing.by_digest);
            }
        }
        merged.extend(self.records.lock().expect("records lock").clone());
        let mut out = fs::File::create(path)?;
        for record in merged.values() {
            writeln!(out, "{}", serde_json::to_string(record).expect("record serializes"))?;
        }
        Ok(merged.len())
    }
}

impl Provider for RecordingProvider {
    fn complete(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        let raw = self.inner.complete(call)?;
        let reply = match super::parse_reply(&raw) {
            Ok(v) if !v.is_string() => v,
            _ => Value::String(raw.clone()),
        };
        self.records.lock().expect("records lock").insert(
            call.digest.clone(),
            FixtureRecord {
                digest: call.digest.clone(),
                role: Some(call.request.role),
                template: Some(call.request.template.name.to_string()),
                reply,
            },
        );
        Ok(raw)
    }
}

type ScriptFn = dyn Fn(&ProviderCall<'_>) -> Result<String, ProviderError> + Send + Sync;

/// Answers every call from a closure.
pub struct ScriptedProvider {
    script: Box<ScriptFn>,
}

impl ScriptedProvider {
    pub fn new(script: impl Fn(&ProviderCall<'_>) -> Result<String, ProviderError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(script),
        }
    }
}

impl Provider for ScriptedProvider {
    fn complete(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        (self.script)(call)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{prompts, FieldType, Gateway, GatewayError, OutputContract, StructuredRequest};
    use super::*;
    use serde_json::json;

    fn req(q: &str) -> StructuredRequest {
        StructuredRequest::new(
            Role::Reason,
            prompts::DIRECT_ANSWER,
            OutputContract::new().required("answer", FieldType::String),
        )
        .var("query", q)
    }

    #[test]
    fn matching_digest_returns_canned_reply() {
        let r = req("a");
        let provider = ReplayProvider::new(
            vec![FixtureRecord {
                digest: r.digest(0),
                role: None,
                template: None,
                reply: json!({"answer": "forty-two"}),
            }],
            ReplayMode::Digest,
        )
        .unwrap();
        let gw = Gateway::new(Arc::new(provider));
        assert_eq!(gw.complete_structured(&r).unwrap().value, json!({"answer": "forty-two"}));
    }

    #[test]
    fn unknown_digest_is_an_error() {
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(ReplyTable::new())));
        let err = gw.complete_structured(&req("a")).unwrap_err();
        match err {
            GatewayError::Provider {
                source: ProviderError::NoFixture(d),
                ..
            } => assert_eq!(d, req("a").digest(0)),
            other => panic!("{other:?}"),
        }
        assert!(err_text(&req("a")).contains("no fixture for digest"));
    }

    fn err_text(r: &StructuredRequest) -> String {
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(ReplyTable::new())));
        gw.complete_structured(r).unwrap_err().to_string()
    }

    #[test]
    fn duplicate_digests_rejected() {
        let rec = FixtureRecord {
            digest: "d".into(),
            role: None,
            template: None,
            reply: json!({}),
        };
        assert!(ReplayProvider::new(vec![rec.clone(), rec], ReplayMode::Digest).is_err());
    }

    #[test]
    fn ordered_mode_serves_in_sequence() {
        let recs = ["one", "two"]
            .iter()
            .enumerate()
            .map(|(i, a)| FixtureRecord {
                digest: format!("x{i}"),
                role: None,
                template: None,
                reply: json!({ "answer": a }),
            })
            .collect();
        let gw = Gateway::with_limits(Arc::new(ReplayProvider::new(recs, ReplayMode::Ordered).unwrap()), 2, 1);
        assert_eq!(gw.complete_structured(&req("p")).unwrap().value["answer"], "one");
        assert_eq!(gw.complete_structured(&req("q")).unwrap().value["answer"], "two");
        assert!(gw.complete_structured(&req("r")).is_err());
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let live = Arc::new(ScriptedProvider::new(|call| {
            Ok(format!("{{\"answer\": \"{}\"}}", call.request.variables["query"].as_str().unwrap()))
        }));
        let recorder = Arc::new(RecordingProvider::new(live));
        let gw = Gateway::new(recorder.clone());
        for q in ["a", "b"] {
            gw.complete_structured(&req(q)).unwrap();
        }
        assert_eq!(recorder.write_jsonl(&path).unwrap(), 2);
        let replay = ReplayProvider::load_jsonl(&path, ReplayMode::Digest).unwrap();
        let gw = Gateway::new(Arc::new(replay));
        assert_eq!(gw.complete_structured(&req("b")).unwrap().value["answer"], "b");
    }

    #[test]
    fn raw_string_fixture_served_verbatim() {
        let r = req("a");
        let mut table = ReplyTable::new();
        table.insert(r.digest(0), Value::String("not json".into()));
        table.insert(r.digest(1), json!({"answer": "ok"}));
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(table)));
        let reply = gw.complete_structured(&r).unwrap();
        assert_eq!(reply.retries_used, 1);
    }
}
