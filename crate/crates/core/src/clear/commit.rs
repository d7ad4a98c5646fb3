use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::staging::StagingStore;
use super::validate::validate_tuples;
use super::ClearError;
use crate::model::{
    constraint_set_digest, schema_fingerprint, CandidateTuple, Constraint, Schema, TupleStatus, Violation,
};

pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const CONSTRAINTS_FILE: &str = "constraints.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedTuple {
    pub tuple: serde_json::Value,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommitReport {
    pub committed: usize,
    pub quarantined: usize,
    pub rejected: usize,
    /// Status counts over every staged tuple.
    pub by_status: BTreeMap<TupleStatus, usize>,
}

/// The committed database: per-table rows and the quarantine.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalStore {
    pub schema: Schema,
    pub constraints: Vec<Constraint>,
    tables: BTreeMap<String, Vec<CandidateTuple>>,
    pub quarantine: Vec<(CandidateTuple, Vec<Violation>)>,
    pub report: CommitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_fingerprint: String,
    constraint_set_digest: String,
    tables: BTreeMap<String, usize>,
    quarantine_file: String,
    report: CommitReport,
}

fn status_counts(store: &StagingStore) -> BTreeMap<TupleStatus, usize> {
    let mut counts = BTreeMap::new();
    for t in store.tuples() {
        *counts.entry(t.status).or_insert(0) += 1;
    }
    counts
}

/// Commits accepted and corrected tuples. Tuples still involved in a
/// violation go to quarantine, repeatedly, until the committed part
/// validates clean.
pub fn commit(store: &StagingStore) -> Result<RelationalStore, ClearError> {
    let mut candidates: Vec<&CandidateTuple> = store
        .tuples()
        .filter(|t| matches!(t.status, TupleStatus::Accepted | TupleStatus::Corrected))
        .collect();
    let mut quarantine: BTreeMap<String, (CandidateTuple, Vec<Violation>)> = BTreeMap::new();
    loop {
        let violations = validate_tuples(store.schema(), store.constraints(), &candidates)?;
        if violations.is_empty() {
            break;
        }
        let offending: BTreeSet<&String> = violations.iter().flat_map(|v| &v.offending_tuple_ids).collect();
        for v in &violations {
            for id in &v.offending_tuple_ids {
                let tuple = store.get(id).expect("violation names a staged tuple");
                let entry = quarantine.entry(id.clone()).or_insert_with(|| {
                    let mut t = tuple.clone();
                    t.status = TupleStatus::Violating;
                    (t, Vec::new())
                });
                entry.1.push(v.clone());
            }
        }
        candidates.retain(|t| !offending.contains(&t.tuple_id));
    }
    let mut store_out = RelationalStore::from_rows(
        store.schema().clone(),
        store.constraints().to_vec(),
        candidates.into_iter().cloned().collect(),
    );
    store_out.quarantine = quarantine.into_values().collect();
    store_out.report = CommitReport {
        committed: store_out.len(),
        quarantined: store_out.quarantine.len(),
        rejected: store.tuples().filter(|t| t.status == TupleStatus::Rejected).count(),
        by_status: status_counts(store),
    };
    Ok(store_out)
}

/// Commits every live tuple without checks, as accepted.
pub fn commit_unchecked(store: &StagingStore) -> RelationalStore {
    let rows: Vec<CandidateTuple> = store
        .live_tuples()
        .cloned()
        .map(|mut t| {
            if t.status == TupleStatus::Pending {
                t.status = TupleStatus::Accepted;
            }
            t
        })
        .collect();
    let mut out = RelationalStore::from_rows(store.schema().clone(), store.constraints().to_vec(), rows);
    out.report = CommitReport {
        committed: out.len(),
        quarantined: 0,
        rejected: store.tuples().filter(|t| t.status == TupleStatus::Rejected).count(),
        by_status: status_counts(store),
    };
    out
}

impl RelationalStore {
    pub fn from_rows(schema: Schema, constraints: Vec<Constraint>, rows: Vec<CandidateTuple>) -> Self {
        let mut tables: BTreeMap<String, Vec<CandidateTuple>> =
            schema.tables.iter().map(|t| (t.name.clone(), Vec::new())).collect();
        for r in rows {
            tables.entry(r.table.clone()).or_default().push(r);
        }
        for rows in tables.values_mut() {
            rows.sort_by(|a, b| a.tuple_id.cmp(&b.tuple_id));
        }
        Self {
            schema,
            constraints,
            tables,
            quarantine: Vec::new(),
            report: CommitReport::default(),
        }
    }

    pub fn rows(&self, table: &str) -> &[CandidateTuple] {
        self.tables.get(table).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.tables.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tuple(&self, tuple_id: &str) -> Option<&CandidateTuple> {
        self.tables.values().flatten().find(|t| t.tuple_id == tuple_id)
    }

    pub fn all_rows(&self) -> impl Iterator<Item = &CandidateTuple> {
        self.tables.values().flatten()
    }

    /// Writes one JSONL file per table, the quarantine, schema, constraints
    /// and a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ClearError> {
        fs::create_dir_all(dir)?;
        for (name, rows) in &self.tables {
            let mut out = fs::File::create(dir.join(format!("{name}.jsonl")))?;
            for r in rows {
                let line = json!({
                    "tuple_id": r.tuple_id,
                    "values": crate::model::values_to_json(&r.values),
                    "raw_values": r.raw_values,
                    "source": r.source,
                    "status": r.status,
                    "confidence": r.confidence,
                    "notes": r.notes,
                });
                writeln!(out, "{line}")?;
            }
        }
        let mut q = fs::File::create(dir.join(QUARANTINE_FILE))?;
        for (t, violations) in &self.quarantine {
            let record = QuarantinedTuple {
                tuple: t.to_json(),
                violations: violations.clone(),
            };
            writeln!(q, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        }
        fs::write(dir.join(SCHEMA_FILE), self.schema.to_json_pretty())?;
        fs::write(
            dir.join(CONSTRAINTS_FILE),
            serde_json::to_string_pretty(&self.constraints).expect("constraints serialize"),
        )?;
        let manifest = Manifest {
            schema_fingerprint: schema_fingerprint(&self.schema).map_err(|e| ClearError::Format(e.to_string()))?,
            constraint_set_digest: constraint_set_digest(&self.constraints),
            tables: self.tables.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
            quarantine_file: QUARANTINE_FILE.into(),
            report: self.report.clone(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ClearError> {
        let fmt = |e: &dyn std::fmt::Display| ClearError::Format(e.to_string());
        let schema = Schema::from_json(&fs::read_to_string(dir.join(SCHEMA_FILE))?).map_err(|e| fmt(&e))?;
        let constraints: Vec<Constraint> =
            serde_json::from_str(&fs::read_to_string(dir.join(CONSTRAINTS_FILE))?).map_err(|e| fmt(&e))?;
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?).map_err(|e| fmt(&e))?;
        if schema_fingerprint(&schema).map_err(|e| fmt(&e))? != manifest.schema_fingerprint {
            return Err(ClearError::Format("schema does not match the manifest fingerprint".into()));
        }
        let mut rows = Vec::new();
        for name in manifest.tables.keys() {
            let file = fs::File::open(dir.join(format!("{name}.jsonl")))?;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut value: serde_json::Value = serde_json::from_str(&line).map_err(|e| fmt(&e))?;
                value["table"] = json!(name);
                rows.push(CandidateTuple::from_json(&value, &schema).map_err(|e| fmt(&e))?);
            }
        }
        let mut quarantine = Vec::new();
        let file = fs::File::open(dir.join(&manifest.quarantine_file))?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: QuarantinedTuple = serde_json::from_str(&line).map_err(|e| fmt(&e))?;
            let tuple = CandidateTuple::from_json(&record.tuple, &schema).map_err(|e| fmt(&e))?;
            quarantine.push((tuple, record.violations));
        }
        let mut out = Self::from_rows(schema, constraints, rows);
        out.quarantine = quarantine;
        out.report = manifest.report;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttrRef, AttributeDef, ChunkRef, ConstraintKind, DataType, TableDef, Value};

    fn schema() -> Schema {
        Schema::new(
            vec![
                TableDef::new(
                    "Person",
                    vec![
                        AttributeDef::required("pid", DataType::Identifier),
                        AttributeDef::new("employer", DataType::Identifier),
                        AttributeDef::new("age", DataType::Integer),
                    ],
                )
                .with_key(&["pid"]),
                TableDef::new("Company", vec![AttributeDef::required("name", DataType::Identifier)])
                    .with_key(&["name"]),
            ],
            vec![crate::model::JoinLink::new(
                AttrRef::new("Person", "employer"),
                AttrRef::new("Company", "name"),
            )],
        )
    }

    fn constraints() -> Vec<Constraint> {
        vec![
            Constraint::new(
                "fd",
                ConstraintKind::FunctionalDependency {
                    table: "Person".into(),
                    determinant: vec!["pid".into()],
                    dependent: "age".into(),
                },
            ),
            Constraint::new(
                "fk",
                ConstraintKind::ForeignKey {
                    child: AttrRef::new("Person", "employer"),
                    parent: AttrRef::new("Company", "name"),
                },
            ),
        ]
    }

    fn person(id: &str, pid: &str, employer: &str, age: i64) -> CandidateTuple {
        let mut t = CandidateTuple::new(id, "Person", ChunkRef::new("d", 0, 0, 4).unwrap())
            .with("pid", Some(Value::Identifier(pid.into())))
            .with("employer", Some(Value::Identifier(employer.into())))
            .with("age", Some(Value::Integer(age)));
        t.status = TupleStatus::Accepted;
        t
    }

    fn company(id: &str, name: &str) -> CandidateTuple {
        let mut t = CandidateTuple::new(id, "Company", ChunkRef::new("d", 0, 0, 4).unwrap())
            .with("name", Some(Value::Identifier(name.into())));
        t.status = TupleStatus::Corrected;
        t
    }

    fn store(tuples: Vec<CandidateTuple>) -> StagingStore {
        let mut s = StagingStore::new(schema(), constraints()).unwrap();
        for t in tuples {
            s.insert(t).unwrap();
        }
        s
    }

    #[test]
    fn clean_store_commits_everything() {
        let s = store(vec![
            company("c1", "acme"),
            company("c2", "globex"),
            person("p1", "a", "acme", 30),
            person("p2", "b", "globex", 40),
            person("p3", "c", "acme", 50),
        ]);
        let db = commit(&s).unwrap();
        assert_eq!(db.report.committed, 5);
        assert_eq!(db.report.quarantined, 0);
    }

    #[test]
    fn unresolved_fd_pair_is_quarantined() {
        let s = store(vec![
            company("c1", "acme"),
            person("p1", "a", "acme", 30),
            person("p2", "a", "acme", 31),
        ]);
        let db = commit(&s).unwrap();
        assert_eq!(db.report.quarantined, 2);
        assert_eq!(db.report.committed, 1);
        assert!(db.quarantine.iter().all(|(t, v)| t.status == TupleStatus::Violating && !v.is_empty()));
    }

    #[test]
    fn quarantining_a_parent_cascades() {
        let s = store(vec![
            company("c1", "acme"),
            person("p0", "z", "nowhere", 20),
            person("p1", "a", "acme", 30),
        ]);
        let mut bad_parent = s.clone();
        bad_parent.set_status("c1", TupleStatus::Pending).unwrap();
        let db = commit(&bad_parent).unwrap();
        assert_eq!(db.report.committed, 0);
        assert_eq!(db.report.quarantined, 2);
        let live: Vec<&CandidateTuple> = db.all_rows().collect();
        assert!(validate_tuples(&db.schema, &db.constraints, &live).unwrap().is_empty());
    }

    #[test]
    fn empty_store() {
        let db = commit(&store(vec![])).unwrap();
        assert!(db.is_empty());
        assert_eq!(db.report, CommitReport::default());
    }

    #[test]
    fn unchecked_commit_keeps_violations() {
        let s = store(vec![person("p1", "a", "nowhere", 30)]);
        let db = commit_unchecked(&s);
        assert_eq!(db.report.committed, 1);
        assert!(db.quarantine.is_empty());
    }

    #[test]
    fn save_and_load() {
        let s = store(vec![
            company("c1", "acme"),
            person("p1", "a", "acme", 30),
            person("p2", "a", "acme", 31),
        ]);
        let db = commit(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path()).unwrap();
        let back = RelationalStore::load(dir.path()).unwrap();
        assert_eq!(back, db);
    }
}
