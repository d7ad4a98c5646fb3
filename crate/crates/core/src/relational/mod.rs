//! Relational answering over the committed store: plan compilation,
//! optimization, execution with provenance, SQL rendering and answer
//! synthesis.

pub mod exec;
pub mod optimize;
pub mod plan;
pub mod sql;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use exec::{execute_plan, execute_relation, Relation, Row};
pub use optimize::{estimate, optimize_plan, TableStats, FILTER_SELECTIVITY};
pub use plan::{AggExpr, AggFunc, CmpOp, Column, ColumnRef, JoinOn, Literal, Operand, Plan, Predicate, SortKey};
pub use sql::{emit_sql, parse_sql, GRAMMAR};

use crate::clear::RelationalStore;
use crate::corpus::{char_slice, Corpus};
use crate::gateway::{prompts, FieldType, Gateway, GatewayError, OutputContract, Role, StructuredRequest};
use crate::model::{ChunkRef, DataType, ProvenanceChain, ProvenanceEntry, Query, Schema, Value};

/// Characters of source text quoted per provenance entry.
pub const SNIPPET_CHARS: usize = 300;
pub const NO_MATCH_TEXT: &str = "no matching records";

#[derive(Debug, Error)]
pub enum RelationalError {
    #[error("no tables to query")]
    NoTables,
    #[error("invalid plan at {node}: {message}")]
    InvalidPlan { node: &'static str, message: String },
    #[error("execution failed at {node}: {message}")]
    Execution { node: &'static str, message: String },
    #[error("sql: {0}")]
    Parse(String),
    #[error("provenance: {0}")]
    Provenance(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Format(String),
}

/// Rows of typed values with one provenance set per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub types: Vec<DataType>,
    pub rows: Vec<Vec<Option<Value>>>,
    pub provenance: ProvenanceChain,
}

#[derive(Serialize, Deserialize)]
struct ResultSetWire {
    columns: Vec<String>,
    types: Vec<DataType>,
    rows: Vec<Vec<Json>>,
    provenance: ProvenanceChain,
}

impl Serialize for ResultSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ResultSetWire {
            columns: self.columns.clone(),
            types: self.types.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|c| c.as_ref().map_or(Json::Null, Value::to_json)).collect())
                .collect(),
            provenance: self.provenance.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResultSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = ResultSetWire::deserialize(d)?;
        if w.columns.len() != w.types.len() || w.rows.len() != w.provenance.rows.len() {
            return Err(D::Error::custom("result set parts disagree in length"));
        }
        let mut rows = Vec::with_capacity(w.rows.len());
        for r in &w.rows {
            if r.len() != w.types.len() {
                return Err(D::Error::custom("row arity differs from columns"));
            }
            let row = r
                .iter()
                .zip(&w.types)
                .map(|(j, t)| Value::from_json(j, *t))
                .collect::<Result<Vec<_>, _>>()
                .map_err(D::Error::custom)?;
            rows.push(row);
        }
        Ok(ResultSet {
            columns: w.columns,
            types: w.types,
            rows,
            provenance: w.provenance,
        })
    }
}

impl ResultSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows as multisets of `(values, provenance)` for order-free comparison.
    pub fn sorted_rows(&self) -> Vec<(Vec<Option<Value>>, crate::model::RowProvenance)> {
        let mut out: Vec<_> = self
            .rows
            .iter()
            .cloned()
            .zip(self.provenance.rows.iter().cloned())
            .collect();
        out.sort();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.as_ref().map(Value::render).unwrap_or_default()))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    pub fn rows_json(&self) -> Json {
        serde_json::to_value(self).expect("result serializes")["rows"].clone()
    }
}

/// A source passage backing a result row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub tuple_id: String,
    pub source: ChunkRef,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub sql_text: String,
    /// Digest of the result's provenance chain.
    pub evidence: String,
    pub result: ResultSet,
    pub citations: Vec<Citation>,
    /// Set when the model reply was replaced by the template rendering.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Answer {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("answer serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Synthesis {
    #[default]
    Model,
    Template,
}

fn schema_json(schema: &Schema) -> Json {
    serde_json::to_value(schema).expect("schema serializes")
}

fn parse_plan_reply(reply: &Json, schema: &Schema) -> Result<Plan, String> {
    let plan = match &reply["plan"] {
        Json::String(sql) => parse_sql(sql).map_err(|e| e.to_string())?,
        v @ Json::Object(_) => serde_json::from_value::<Plan>(v.clone()).map_err(|e| format!("plan does not parse: {e}"))?,
        other => return Err(format!("plan must be a string or an object, got {other}")),
    };
    plan.validate(schema).map_err(|e| e.to_string())?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPlan {
    pub plan: Plan,
    pub retries_used: usize,
}

/// Asks the reasoning role for a plan and validates it against `schema`,
/// with one repair round on a validation failure.
pub fn compile_query(gateway: &Gateway, query: &Query, schema: &Schema) -> Result<CompiledPlan, RelationalError> {
    if schema.tables.is_empty() {
        return Err(RelationalError::NoTables);
    }
    let req = StructuredRequest::new(
        Role::Reason,
        prompts::COMPILE_PLAN,
        OutputContract::new().required("plan", FieldType::Any),
    )
    .var("query", query.text.clone())
    .var("schema", schema_json(schema))
    .var("grammar", GRAMMAR);
    let (plan, reply) = gateway.complete_with(&req, 1, |v| parse_plan_reply(v, schema))?;
    Ok(CompiledPlan {
        plan,
        retries_used: reply.retries_used,
    })
}

/// Source text for every tuple a result cites, first citation first.
pub fn citations(result: &ResultSet, corpus: &Corpus) -> Vec<Citation> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for row in &result.provenance.rows {
        for ProvenanceEntry { tuple_id, source } in row {
            if !seen.insert(tuple_id.clone()) {
                continue;
            }
            let text = corpus.resolve_span(source).unwrap_or_default();
            let snippet = char_slice(text, 0, text.chars().count().min(SNIPPET_CHARS))
                .unwrap_or_default()
                .to_string();
            out.push(Citation {
                tuple_id: tuple_id.clone(),
                source: source.clone(),
                snippet,
            });
        }
    }
    out
}

/// Deterministic answer text: one value, a comma list for one column, or
/// one ` | `-separated line per row.
pub fn render_template(result: &ResultSet) -> String {
    let cell = |c: &Option<Value>| c.as_ref().map_or_else(|| "null".to_string(), Value::render);
    if result.rows.is_empty() {
        return NO_MATCH_TEXT.to_string();
    }
    if result.columns.len() == 1 {
        return result.rows.iter().map(|r| cell(&r[0])).collect::<Vec<_>>().join(", ");
    }
    result
        .rows
        .iter()
        .map(|r| r.iter().map(cell).collect::<Vec<_>>().join(" | "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Bundles the result with an answer text from the reasoning role, or from
/// the template when `mode` says so or the call fails.
pub fn synthesize_answer(
    gateway: &Gateway,
    query: &Query,
    sql_text: &str,
    result: ResultSet,
    corpus: &Corpus,
    mode: Synthesis,
) -> Answer {
    let cites = citations(&result, corpus);
    let evidence = result.provenance.digest();
    let mut answer = Answer {
        text: render_template(&result),
        sql_text: sql_text.to_string(),
        evidence,
        result,
        citations: cites,
        fallback: false,
        warnings: Vec::new(),
    };
    if mode == Synthesis::Template {
        return answer;
    }
    let passages: Vec<Json> = answer
        .citations
        .iter()
        .map(|c| json!({"tuple_id": c.tuple_id, "source": c.source.to_string(), "text": c.snippet}))
        .collect();
    let req = StructuredRequest::new(
        Role::Reason,
        prompts::SYNTHESIZE_ANSWER,
        OutputContract::new().required("answer", FieldType::String),
    )
    .var("query", query.text.clone())
    .var("sql", sql_text)
    .var("columns", json!(answer.result.columns))
    .var("rows", answer.result.rows_json())
    .var("evidence", Json::Array(passages));
    match gateway.complete_structured(&req) {
        Ok(reply) => answer.text = reply.value["answer"].as_str().unwrap_or_default().to_string(),
        Err(e) => {
            answer.fallback = true;
            answer.warnings.push(format!("synthesis fell back to the template: {e}"));
        }
    }
    answer
}

/// Plans and result of one relational answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Reasoning {
    pub plan: Plan,
    pub optimized: Plan,
    pub retries_used: usize,
    pub answer: Answer,
}

/// Compiles, optimizes, executes and synthesizes.
pub fn answer_query(
    gateway: &Gateway,
    query: &Query,
    db: &RelationalStore,
    corpus: &Corpus,
    mode: Synthesis,
) -> Result<Reasoning, RelationalError> {
    let compiled = compile_query(gateway, query, &db.schema)?;
    let optimized = optimize_plan(&compiled.plan, &db.schema, &TableStats::from_store(db));
    let result = execute_plan(&optimized, db)?;
    let sql_text = emit_sql(&optimized);
    let answer = synthesize_answer(gateway, query, &sql_text, result, corpus, mode);
    Ok(Reasoning {
        plan: compiled.plan,
        optimized,
        retries_used: compiled.retries_used,
        answer,
    })
}
