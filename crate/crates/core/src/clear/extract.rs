use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

use crate::corpus::{normalize_terms, Chunk};
use crate::gateway::{prompts, FieldType, Gateway, OutputContract, Role, StructuredRequest};
use crate::model::{json_scalar_text, normalize_value, CandidateTuple, Schema, TableDef, TupleStatus, Value as TypedValue};

/// Minimum shared prefix for two terms to count as the same surface form.
const SHARED_PREFIX: usize = 5;

/// Tuples extracted from one chunk plus what went wrong along the way.
#[derive(Debug, Clone, Default)]
pub struct ExtractionOutcome {
    pub tuples: Vec<CandidateTuple>,
    pub notes: Vec<String>,
    pub failed_tables: Vec<String>,
    pub calls: usize,
}

fn terms_match(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let shared = a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count();
    shared >= SHARED_PREFIX
}

/// Surface terms of a table: its name and attribute names split on `_`.
pub fn table_terms(table: &TableDef) -> BTreeSet<String> {
    std::iter::once(table.name.as_str())
        .chain(table.attributes.iter().map(|a| a.name.as_str()))
        .flat_map(|n| normalize_terms(&n.replace('_', " ")))
        .collect()
}

/// Whether the chunk mentions the table name or any attribute name.
pub fn lexically_overlaps(chunk_text: &str, table: &TableDef) -> bool {
    let chunk_terms: BTreeSet<String> = normalize_terms(chunk_text).into_iter().collect();
    let wanted = table_terms(table);
    chunk_terms
        .iter()
        .any(|c| wanted.iter().any(|w| terms_match(c, w)))
}

pub(crate) fn table_json(table: &TableDef) -> Value {
    serde_json::to_value(table).expect("table serializes")
}

pub(crate) fn extraction_contract() -> OutputContract {
    OutputContract::new().required("tuples", FieldType::Array)
}

pub(crate) fn extraction_request(chunk: &Chunk, table: &TableDef) -> StructuredRequest {
    StructuredRequest::new(Role::Extract, prompts::EXTRACT_TUPLES, extraction_contract())
        .var("table_name", table.name.clone())
        .var("table", table_json(table))
        .var("passage", chunk.text.clone())
}

/// Normalized values, raw surface forms and notes for one reply row.
pub(crate) struct ParsedRow {
    pub values: BTreeMap<String, Option<TypedValue>>,
    pub raw: BTreeMap<String, String>,
    pub confidence: Option<f64>,
    pub notes: Vec<String>,
}

pub(crate) fn parse_row(values: &Value, confidence: Option<&Value>, table: &TableDef) -> ParsedRow {
    let mut out = ParsedRow {
        values: BTreeMap::new(),
        raw: BTreeMap::new(),
        confidence: None,
        notes: Vec::new(),
    };
    let empty = serde_json::Map::new();
    let obj = values.as_object().unwrap_or(&empty);
    for key in obj.keys() {
        if table.attribute(key).is_none() {
            out.notes.push(format!("dropped unknown attribute {key}"));
        }
    }
    for attr in &table.attributes {
        let raw = obj.get(&attr.name).and_then(json_scalar_text);
        let value = match &raw {
            None => None,
            Some(text) => match normalize_value(text, attr.datatype) {
                Ok(v) => v,
                Err(e) => {
                    out.notes.push(format!("{}: {e}", attr.name));
                    None
                }
            },
        };
        if let Some(text) = raw {
            out.raw.insert(attr.name.clone(), text);
        }
        out.values.insert(attr.name.clone(), value);
    }
    match confidence {
        None | Some(Value::Null) => {}
        Some(c) => match c.as_f64() {
            Some(x) if (0.0..=1.0).contains(&x) => out.confidence = Some(x),
            _ => out.notes.push(format!("ignored confidence {c}")),
        },
    }
    out
}

fn row_has_content(row: &ParsedRow) -> bool {
    row.values.values().any(Option::is_some)
}

/// One extraction call per table the chunk lexically mentions. Tables with
/// no overlap are skipped without a call.
pub fn extract_tuples(gateway: &Gateway, chunk: &Chunk, schema: &Schema) -> ExtractionOutcome {
    let mut outcome = ExtractionOutcome::default();
    for table in &schema.tables {
        if !lexically_overlaps(&chunk.text, table) {
            continue;
        }
        outcome.calls += 1;
        let req = extraction_request(chunk, table);
        let reply = match gateway.complete_structured(&req) {
            Ok(r) => r,
            Err(e) => {
                outcome.notes.push(format!(
                    "extraction failed for {} in {}: {e}",
                    table.name, chunk.location
                ));
                outcome.failed_tables.push(table.name.clone());
                continue;
            }
        };
        let rows = reply.value["tuples"].as_array().cloned().unwrap_or_default();
        for row in rows {
            let (values, confidence) = match row.get("values") {
                Some(v) => (v.clone(), row.get("confidence").cloned()),
                None => (row.clone(), None),
            };
            let parsed = parse_row(&values, confidence.as_ref(), table);
            if !row_has_content(&parsed) {
                continue;
            }
            let index = outcome.tuples.iter().filter(|t| t.table == table.name).count();
            let mut tuple = CandidateTuple::new(
                tuple_id(chunk, &table.name, index),
                table.name.clone(),
                chunk.location.clone(),
            );
            tuple.values = parsed.values;
            tuple.raw_values = parsed.raw;
            tuple.confidence = parsed.confidence;
            tuple.status = TupleStatus::Pending;
            tuple.notes = parsed.notes;
            outcome.tuples.push(tuple);
        }
    }
    outcome
}

pub fn tuple_id(chunk: &Chunk, table: &str, index: usize) -> String {
    format!(
        "{}:{}:{}:{}",
        chunk.location.doc_id, chunk.location.chunk_index, table, index
    )
}

/// Extracts over many chunks with the gateway's concurrency, keeping chunk
/// order in the output.
pub fn extract_all(gateway: &Gateway, chunks: &[&Chunk], schema: &Schema) -> ExtractionOutcome {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(gateway.max_in_flight())
        .build()
        .expect("thread pool");
    let per_chunk: Vec<ExtractionOutcome> =
        pool.install(|| chunks.par_iter().map(|c| extract_tuples(gateway, c, schema)).collect());
    let mut merged = ExtractionOutcome::default();
    for o in per_chunk {
        merged.tuples.extend(o.tuples);
        merged.notes.extend(o.notes);
        merged.failed_tables.extend(o.failed_tables);
        merged.calls += o.calls;
    }
    merged
}

pub(crate) fn tuple_summary(t: &CandidateTuple) -> Value {
    json!({
        "tuple_id": t.tuple_id,
        "table": t.table,
        "values": crate::model::values_to_json(&t.values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ReplayProvider, ReplyTable};
    use crate::model::{AttributeDef, ChunkRef, DataType};
    use std::sync::Arc;

    fn company() -> Schema {
        Schema::new(
            vec![TableDef::new(
                "Company",
                vec![
                    AttributeDef::required("name", DataType::Identifier),
                    AttributeDef::new("founding_year", DataType::Integer),
                ],
            )
            .with_key(&["name"])],
            vec![],
        )
    }

    fn chunk(text: &str) -> Chunk {
        Chunk {
            location: ChunkRef::new("d1", 0, 0, text.chars().count()).unwrap(),
            text: text.into(),
        }
    }

    fn gateway_with(chunk: &Chunk, schema: &Schema, reply: Value) -> Gateway {
        let mut table = ReplyTable::new();
        table.insert(extraction_request(chunk, &schema.tables[0]).digest(0), reply);
        Gateway::new(Arc::new(ReplayProvider::from_table(table)))
    }

    #[test]
    fn extracts_and_normalizes() {
        let schema = company();
        let c = chunk("Acme is a robotics company, founded 1999.");
        let gw = gateway_with(
            &c,
            &schema,
            json!({"tuples": [{"values": {"name": "Acme", "founding_year": "1999"}, "confidence": 0.93}]}),
        );
        let out = extract_tuples(&gw, &c, &schema);
        assert_eq!(out.calls, 1);
        assert_eq!(out.tuples.len(), 1);
        let t = &out.tuples[0];
        assert_eq!(t.value("name"), Some(&TypedValue::Identifier("acme".into())));
        assert_eq!(t.value("founding_year"), Some(&TypedValue::Integer(1999)));
        assert_eq!(t.raw_values["name"], "Acme");
        assert_eq!(t.confidence, Some(0.93));
        assert_eq!(t.status, TupleStatus::Pending);
        assert_eq!(t.tuple_id, "d1:0:Company:0");
    }

    #[test]
    fn no_overlap_means_no_call() {
        let schema = company();
        let c = chunk("The weather was mild all week.");
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(ReplyTable::new())));
        let out = extract_tuples(&gw, &c, &schema);
        assert_eq!(out.calls, 0);
        assert!(out.tuples.is_empty());
        assert!(gw.calls().is_empty());
    }

    #[test]
    fn shared_prefix_counts_as_overlap() {
        let t = &company().tables[0];
        assert!(lexically_overlaps("Acme, founded 1999", t));
        assert!(!lexically_overlaps("Acme, est. 1999", t));
    }

    #[test]
    fn unparseable_value_becomes_null_with_note() {
        let schema = company();
        let c = chunk("Acme company plans a launch next year.");
        let gw = gateway_with(
            &c,
            &schema,
            json!({"tuples": [{"values": {"name": "Acme", "founding_year": "next year", "ceo": "x"}, "confidence": 1.7}]}),
        );
        let t = &extract_tuples(&gw, &c, &schema).tuples[0];
        assert_eq!(t.value("founding_year"), None);
        assert_eq!(t.raw_values["founding_year"], "next year");
        assert!(t.notes.iter().any(|n| n.contains("founding_year")));
        assert!(t.notes.iter().any(|n| n.contains("unknown attribute ceo")));
        assert_eq!(t.confidence, None);
        assert!(!t.values.contains_key("ceo"));
    }

    #[test]
    fn empty_reply_and_failed_call() {
        let schema = company();
        let c = chunk("No company facts here.");
        let gw = gateway_with(&c, &schema, json!({"tuples": []}));
        assert!(extract_tuples(&gw, &c, &schema).tuples.is_empty());
        let gw = Gateway::new(Arc::new(ReplayProvider::from_table(ReplyTable::new())));
        let out = extract_tuples(&gw, &c, &schema);
        assert_eq!(out.failed_tables, vec!["Company".to_string()]);
        assert!(out.notes[0].contains("extraction failed"));
    }
}
