//! Domain types shared by every pipeline stage.

mod schema;
mod value;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use schema::{
    is_valid_identifier, schema_fingerprint, validate_schema, AttrRef, AttributeDef, JoinLink,
    Schema, TableDef,
};
pub use value::{
    json_scalar_text, normalize_identifier, normalize_value, parse_date, parse_datetime, DataType,
    NormalizeError, Value,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid schema")]
    InvalidSchema,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("invalid chunk span ({0}, {1})")]
    InvalidSpan(usize, usize),
    #[error("malformed input: {0}")]
    Format(String),
}

/// A natural-language question over the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyQuery);
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }

    /// A query whose id is derived from its text.
    pub fn from_text(text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        let id = format!("q-{}", &sha256_hex(text.trim().as_bytes())[..12]);
        Self::new(id, text)
    }
}

/// Location of a chunk inside its source document. Offsets count Unicode
/// scalar values, `start` inclusive and `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_index: usize,
    pub char_span: (usize, usize),
}

impl ChunkRef {
    pub fn new(doc_id: impl Into<String>, chunk_index: usize, start: usize, end: usize) -> Result<Self, ModelError> {
        if start >= end {
            return Err(ModelError::InvalidSpan(start, end));
        }
        Ok(Self {
            doc_id: doc_id.into(),
            chunk_index,
            char_span: (start, end),
        })
    }
}

impl fmt::Display for ChunkRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}#{}[{}..{}]",
            self.doc_id, self.chunk_index, self.char_span.0, self.char_span.1
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TupleStatus {
    Pending,
    Accepted,
    Violating,
    Corrected,
    Rejected,
}

impl TupleStatus {
    pub fn is_live(self) -> bool {
        self != TupleStatus::Rejected
    }
}

/// One extracted row before commit.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTuple {
    pub tuple_id: String,
    pub table: String,
    pub values: BTreeMap<String, Option<Value>>,
    /// Surface forms as the extractor emitted them, keyed by attribute.
    pub raw_values: BTreeMap<String, String>,
    pub source: ChunkRef,
    pub confidence: Option<f64>,
    pub status: TupleStatus,
    pub notes: Vec<String>,
}

impl CandidateTuple {
    pub fn new(tuple_id: impl Into<String>, table: impl Into<String>, source: ChunkRef) -> Self {
        Self {
            tuple_id: tuple_id.into(),
            table: table.into(),
            values: BTreeMap::new(),
            raw_values: BTreeMap::new(),
            source,
            confidence: None,
            status: TupleStatus::Pending,
            notes: Vec::new(),
        }
    }

    pub fn with(mut self, attr: &str, value: Option<Value>) -> Self {
        if let Some(v) = &value {
            self.raw_values.insert(attr.to_string(), v.render());
        }
        self.values.insert(attr.to_string(), value);
        self
    }

    pub fn value(&self, attr: &str) -> Option<&Value> {
        self.values.get(attr).and_then(|v| v.as_ref())
    }

    /// Checks the tuple against its table definition. Non-nullable
    /// attributes are only enforced once the tuple is accepted.
    pub fn check(&self, table: &TableDef) -> Vec<String> {
        let mut problems = Vec::new();
        for key in self.values.keys() {
            if table.attribute(key).is_none() {
                problems.push(format!("{}: unknown attribute {}.{key}", self.tuple_id, table.name));
            }
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                problems.push(format!("{}: confidence {c} outside [0,1]", self.tuple_id));
            }
        }
        if self.status == TupleStatus::Accepted {
            for attr in table.attributes.iter().filter(|a| !a.nullable) {
                if self.value(&attr.name).is_none() {
                    problems.push(format!("{}: {} is required", self.tuple_id, attr.name));
                }
            }
        }
        problems
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tuple_id": self.tuple_id,
            "table": self.table,
            "values": values_to_json(&self.values),
            "raw_values": self.raw_values,
            "source": self.source,
            "confidence": self.confidence,
            "status": self.status,
            "notes": self.notes,
        })
    }

    pub fn from_json(json: &serde_json::Value, schema: &Schema) -> Result<Self, ModelError> {
        let field = |name: &str| {
            json.get(name)
                .ok_or_else(|| ModelError::Format(format!("tuple missing field {name}")))
        };
        let str_field = |name: &str| -> Result<String, ModelError> {
            field(name)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| ModelError::Format(format!("tuple field {name} is not a string")))
        };
        let table_name = str_field("table")?;
        let table = schema
            .table(&table_name)
            .ok_or_else(|| ModelError::Format(format!("unknown table {table_name}")))?;
        let values = values_from_json(field("values")?, table)?;
        let de = |name: &str| -> Result<serde_json::Value, ModelError> { Ok(field(name)?.clone()) };
        let fmt_err = |e: serde_json::Error| ModelError::Format(e.to_string());
        Ok(Self {
            tuple_id: str_field("tuple_id")?,
            table: table_name,
            values,
            raw_values: json
                .get("raw_values")
                .map(|v| serde_json::from_value(v.clone()).map_err(fmt_err))
                .transpose()?
                .unwrap_or_default(),
            source: serde_json::from_value(de("source")?).map_err(fmt_err)?,
            confidence: json.get("confidence").and_then(|c| c.as_f64()),
            status: serde_json::from_value(de("status")?).map_err(fmt_err)?,
            notes: json
                .get("notes")
                .map(|v| serde_json::from_value(v.clone()).map_err(fmt_err))
                .transpose()?
                .unwrap_or_default(),
        })
    }
}

pub fn values_to_json(values: &BTreeMap<String, Option<Value>>) -> serde_json::Value {
    serde_json::Value::Object(
        values
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.as_ref().map(Value::to_json).unwrap_or(serde_json::Value::Null),
                )
            })
            .collect(),
    )
}

pub fn values_from_json(
    json: &serde_json::Value,
    table: &TableDef,
) -> Result<BTreeMap<String, Option<Value>>, ModelError> {
    let obj = json
        .as_object()
        .ok_or_else(|| ModelError::Format("tuple values must be an object".into()))?;
    let mut out = BTreeMap::new();
    for (k, v) in obj {
        let attr = table
            .attribute(k)
            .ok_or_else(|| ModelError::Format(format!("unknown attribute {}.{k}", table.name)))?;
        let value = Value::from_json(v, attr.datatype).map_err(|e| ModelError::Format(e.to_string()))?;
        out.insert(k.clone(), value);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintOrigin {
    User,
    Proposed,
}

/// The four rule families enforced over staged tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    FunctionalDependency {
        table: String,
        determinant: Vec<String>,
        dependent: String,
    },
    Temporal {
        table: String,
        earlier: String,
        later: String,
        #[serde(default = "strict_default")]
        strict: bool,
    },
    NumericRange {
        table: String,
        attribute: String,
        min: f64,
        max: f64,
    },
    ForeignKey {
        child: AttrRef,
        parent: AttrRef,
    },
}

fn strict_default() -> bool {
    true
}

impl ConstraintKind {
    pub fn label(&self) -> &'static str {
        match self {
            ConstraintKind::FunctionalDependency { .. } => "functional_dependency",
            ConstraintKind::Temporal { .. } => "temporal",
            ConstraintKind::NumericRange { .. } => "numeric_range",
            ConstraintKind::ForeignKey { .. } => "foreign_key",
        }
    }

    /// Every `(table, attribute)` the constraint mentions.
    pub fn references(&self) -> Vec<AttrRef> {
        match self {
            ConstraintKind::FunctionalDependency {
                table,
                determinant,
                dependent,
            } => determinant
                .iter()
                .chain(std::iter::once(dependent))
                .map(|a| AttrRef::new(table.clone(), a.clone()))
                .collect(),
            ConstraintKind::Temporal {
                table,
                earlier,
                later,
                ..
            } => vec![
                AttrRef::new(table.clone(), earlier.clone()),
                AttrRef::new(table.clone(), later.clone()),
            ],
            ConstraintKind::NumericRange {
                table, attribute, ..
            } => vec![AttrRef::new(table.clone(), attribute.clone())],
            ConstraintKind::ForeignKey { child, parent } => vec![child.clone(), parent.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub constraint_id: String,
    #[serde(flatten)]
    pub kind: ConstraintKind,
    #[serde(default = "origin_default")]
    pub origin: ConstraintOrigin,
}

fn origin_default() -> ConstraintOrigin {
    ConstraintOrigin::User
}

impl Constraint {
    pub fn new(id: impl Into<String>, kind: ConstraintKind) -> Self {
        Self {
            constraint_id: id.into(),
            kind,
            origin: ConstraintOrigin::User,
        }
    }

    /// Problems with the constraint relative to `schema`.
    pub fn check(&self, schema: &Schema) -> Vec<String> {
        let mut problems = Vec::new();
        for r in self.kind.references() {
            if schema.resolve(&r).is_none() {
                problems.push(format!("{}: unknown attribute {r}", self.constraint_id));
            }
        }
        if !problems.is_empty() {
            return problems;
        }
        match &self.kind {
            ConstraintKind::NumericRange {
                table,
                attribute,
                min,
                max,
            } => {
                if min > max {
                    problems.push(format!("{}: min {min} > max {max}", self.constraint_id));
                }
                let dt = schema.resolve(&AttrRef::new(table.clone(), attribute.clone())).unwrap().datatype;
                if !dt.is_numeric() {
                    problems.push(format!("{}: {table}.{attribute} is {dt}, not numeric", self.constraint_id));
                }
            }
            ConstraintKind::Temporal { .. } => {
                for r in self.kind.references() {
                    let dt = schema.resolve(&r).unwrap().datatype;
                    if !dt.is_temporal() {
                        problems.push(format!("{}: {r} is {dt}, not date or datetime", self.constraint_id));
                    }
                }
            }
            ConstraintKind::FunctionalDependency { determinant, .. } if determinant.is_empty() => {
                problems.push(format!("{}: empty determinant", self.constraint_id));
            }
            _ => {}
        }
        problems
    }
}

/// Digest of a constraint set, independent of list order.
pub fn constraint_set_digest(constraints: &[Constraint]) -> String {
    let mut lines: Vec<String> = constraints
        .iter()
        .map(|c| serde_json::to_string(c).expect("constraint serializes"))
        .collect();
    lines.sort();
    sha256_hex(lines.join("\n").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub constraint_id: String,
    pub offending_tuple_ids: BTreeSet<String>,
    pub detail: String,
}

/// One `(tuple, source span)` link in a result row's provenance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub tuple_id: String,
    pub source: ChunkRef,
}

pub type RowProvenance = BTreeSet<ProvenanceEntry>;

/// Provenance for every row of a result, in row order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProvenanceChain {
    pub rows: Vec<RowProvenance>,
}

impl ProvenanceChain {
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("provenance serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_rejects_blank() {
        assert_eq!(Query::new("q", "   \n"), Err(ModelError::EmptyQuery));
        assert!(Query::from_text("compare founding years").is_ok());
    }

    #[test]
    fn chunk_ref_span_order() {
        assert!(ChunkRef::new("d", 0, 3, 3).is_err());
        assert!(ChunkRef::new("d", 0, 2, 3).is_ok());
    }

    #[test]
    fn constraint_json_shape() {
        let c = Constraint::new(
            "fd1",
            ConstraintKind::FunctionalDependency {
                table: "Person".into(),
                determinant: vec!["person_id".into()],
                dependent: "date_of_birth".into(),
            },
        );
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["kind"], "functional_dependency");
        assert_eq!(json["origin"], "user");
        let back: Constraint = serde_json::from_value(json).unwrap();
        assert_eq!(back, c);
        let fk: Constraint = serde_json::from_str(
            r#"{"constraint_id":"fk","kind":"foreign_key",
                "child":{"table":"Stock_Price","attribute":"Company_Ticker"},
                "parent":{"table":"Company","attribute":"Company_Ticker"}}"#,
        )
        .unwrap();
        assert_eq!(fk.kind.label(), "foreign_key");
    }

    #[test]
    fn constraint_checks() {
        let schema = Schema::new(
            vec![TableDef::new(
                "P",
                vec![
                    AttributeDef::new("age", DataType::Integer),
                    AttributeDef::new("name", DataType::Text),
                ],
            )],
            vec![],
        );
        let range = |min, max| {
            Constraint::new(
                "r",
                ConstraintKind::NumericRange {
                    table: "P".into(),
                    attribute: "age".into(),
                    min,
                    max,
                },
            )
        };
        assert!(range(0.0, 130.0).check(&schema).is_empty());
        assert_eq!(range(5.0, 1.0).check(&schema).len(), 1);
        let temporal = Constraint::new(
            "t",
            ConstraintKind::Temporal {
                table: "P".into(),
                earlier: "age".into(),
                later: "name".into(),
                strict: true,
            },
        );
        assert_eq!(temporal.check(&schema).len(), 2);
        let missing = Constraint::new(
            "m",
            ConstraintKind::NumericRange {
                table: "P".into(),
                attribute: "height".into(),
                min: 0.0,
                max: 1.0,
            },
        );
        assert_eq!(missing.check(&schema), vec!["m: unknown attribute P.height".to_string()]);
    }

    #[test]
    fn tuple_check_enforces_required_only_when_accepted() {
        let table = TableDef::new(
            "P",
            vec![AttributeDef::required("name", DataType::Identifier)],
        );
        let src = ChunkRef::new("d", 0, 0, 4).unwrap();
        let mut t = CandidateTuple::new("t1", "P", src).with("name", None);
        assert!(t.check(&table).is_empty());
        t.status = TupleStatus::Accepted;
        assert_eq!(t.check(&table).len(), 1);
        t.values.insert("bogus".into(), None);
        t.confidence = Some(1.5);
        assert_eq!(t.check(&table).len(), 3);
    }
}
