//! A scripted stand-in for every model role. It knows the world's documents
//! and true facts, and answers each template the way a careful model with
//! a careless extractor would.

use std::sync::Arc;

use serde_json::{json, Map, Value};

use docstruct_core::gateway::{ProviderCall, ProviderError, ScriptedProvider};
use docstruct_core::model::{json_scalar_text, Schema, TableDef};
use docstruct_core::relational::parse_sql;

use crate::world::{Doc, World};

/// Extraction confidence reported for every row.
const CONFIDENCE: f64 = 0.95;

pub fn provider(world: Arc<World>) -> ScriptedProvider {
    ScriptedProvider::new(move |call| reply(&world, call).map(|v| v.to_string()))
}

fn fail(msg: impl Into<String>) -> ProviderError {
    ProviderError::Transport(msg.into())
}

fn var<'a>(call: &'a ProviderCall<'_>, name: &str) -> &'a Value {
    call.request.variables.get(name).unwrap_or(&Value::Null)
}

fn same(a: &Value, b: &Value) -> bool {
    match (json_scalar_text(a), json_scalar_text(b)) {
        (Some(x), Some(y)) => x.eq_ignore_ascii_case(&y),
        _ => false,
    }
}

fn reply(world: &World, call: &ProviderCall<'_>) -> Result<Value, ProviderError> {
    match call.request.template.name {
        "schema_init" => schema_init(world, var(call, "query")),
        "schema_refine" => Ok(json!({"edits": []})),
        "ask_alignment_conflict" | "ask_distribution_anomaly" | "ask_missing_relationship" => {
            let signal = var(call, "signal");
            Ok(json!({"question": format!("What do the documents say about {}?", signal)}))
        }
        "resolve_question" => resolve(world, var(call, "signal"), var(call, "schema")),
        "extract_tuples" => {
            let doc = doc_for(world, var(call, "passage"))?;
            let table = table_def(var(call, "table"))?;
            let tuples: Vec<Value> = rows_for(doc, &table)
                .into_iter()
                .map(|values| json!({"values": values, "confidence": CONFIDENCE}))
                .collect();
            Ok(json!({"tuples": tuples}))
        }
        "committee_extract" => {
            let table = table_def(var(call, "table"))?;
            let focus = var(call, "focus");
            let name = focus["values"]["name"].as_str().ok_or_else(|| fail("focus has no name"))?;
            let truth = world.truth(&table.name, name);
            Ok(json!({"values": restrict(&truth, &table), "confidence": CONFIDENCE}))
        }
        "disambiguate" => {
            let table = var(call, "table_name").as_str().unwrap_or_default();
            let attribute = var(call, "attribute").as_str().unwrap_or_default();
            let records = var(call, "records").as_array().cloned().unwrap_or_default();
            let winner = records.iter().find(|r| {
                let name = r["values"]["name"].as_str().unwrap_or_default();
                same(&r["values"][attribute], &world.truth(table, name)[attribute])
            });
            Ok(match winner {
                Some(r) => json!({"decision": "pick", "winner": r["tuple_id"]}),
                None => json!({"decision": "unresolved"}),
            })
        }
        "compile_plan" => {
            let text = var(call, "query").as_str().unwrap_or_default();
            let q = world.question(text).ok_or_else(|| fail(format!("unknown question {text}")))?;
            let schema: Schema = serde_json::from_value(var(call, "schema").clone()).map_err(|e| fail(e.to_string()))?;
            let fits = |sql: &str| parse_sql(sql).is_ok_and(|p| p.validate(&schema).is_ok());
            let sql = match q.fallback_sql {
                Some(fallback) if !fits(q.sql) => fallback,
                _ => q.sql,
            };
            Ok(json!({"plan": sql}))
        }
        "synthesize_answer" => Ok(json!({"answer": render_rows(var(call, "rows"))})),
        "direct_answer" => Ok(json!({"answer": "unknown"})),
        other => Err(fail(format!("no script for template {other}"))),
    }
}

fn schema_init(world: &World, query: &Value) -> Result<Value, ProviderError> {
    let text = query.as_str().unwrap_or_default();
    let q = world.question(text).ok_or_else(|| fail(format!("unknown question {text}")))?;
    Ok(json!({
        "tables": q.schema.tables,
        "links": q.schema.links,
        "query_concepts": q.concepts,
    }))
}

fn doc_for<'a>(world: &'a World, passage: &Value) -> Result<&'a Doc, ProviderError> {
    let passage = passage.as_str().unwrap_or_default();
    world
        .docs
        .iter()
        .find(|d| d.text.contains(passage))
        .ok_or_else(|| fail("passage matches no document"))
}

fn table_def(v: &Value) -> Result<TableDef, ProviderError> {
    serde_json::from_value(v.clone()).map_err(|e| fail(format!("table does not parse: {e}")))
}

fn restrict(values: &Value, table: &TableDef) -> Value {
    let mut out = Map::new();
    for a in &table.attributes {
        if let Some(v) = values.get(&a.name) {
            out.insert(a.name.clone(), v.clone());
        }
    }
    Value::Object(out)
}

/// Rows the extractor reads from `doc` for `table`, in document order.
/// Rows that state nothing beyond the key are left out.
pub fn rows_for(doc: &Doc, table: &TableDef) -> Vec<Value> {
    let key = table.key_attributes();
    doc.rows
        .iter()
        .filter(|r| r.table == table.name)
        .map(|r| restrict(&r.values, table))
        .filter(|v| v.as_object().is_some_and(|o| o.keys().any(|k| !key.contains(k))))
        .collect()
}

/// The entity behind a `doc:chunk:Table:i` tuple id.
fn entity_of(world: &World, tuple_id: &str, schema: &Schema) -> Option<(String, String)> {
    let parts: Vec<&str> = tuple_id.split(':').collect();
    let [doc_id, _, table, index] = parts[..] else {
        return None;
    };
    let doc = world.docs.iter().find(|d| d.id == doc_id)?;
    let def = schema.table(table)?;
    let row = rows_for(doc, def).into_iter().nth(index.parse().ok()?)?;
    Some((table.to_string(), row["name"].as_str()?.to_string()))
}

fn resolve(world: &World, signal: &Value, schema: &Value) -> Result<Value, ProviderError> {
    let schema: Schema = serde_json::from_value(schema.clone()).map_err(|e| fail(e.to_string()))?;
    let correction = |tuple_id: &str, table: &str, name: &str, attribute: &str| {
        let value = world.truth(table, name)[attribute].clone();
        (!value.is_null()).then(|| json!({"tuple_id": tuple_id, "attribute": attribute, "value": value}))
    };
    match signal["kind"].as_str().unwrap_or_default() {
        "alignment_conflict" => {
            let table = signal["table"].as_str().unwrap_or_default();
            let name = signal["key"][0].as_str().unwrap_or_default();
            let attribute = signal["attribute"].as_str().unwrap_or_default();
            let corrections: Vec<Value> = signal["tuple_ids"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|id| correction(id.as_str()?, table, name, attribute))
                .collect();
            Ok(value_corrections(corrections))
        }
        "distribution_anomaly" => {
            let attribute = signal["attribute"].as_str().unwrap_or_default();
            let corrections: Vec<Value> = signal["outliers"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|o| {
                    let id = o["tuple_id"].as_str()?;
                    let (table, name) = entity_of(world, id, &schema)?;
                    correction(id, &table, &name, attribute)
                })
                .collect();
            Ok(value_corrections(corrections))
        }
        "missing_relationship" => {
            let target = signal["target"].as_str().unwrap_or_default();
            Ok(match world.link_edits.iter().find(|(t, _)| *t == target) {
                Some((_, edits)) => json!({"resolution": "schema_edit", "edits": edits}),
                None => json!({"resolution": "unresolved"}),
            })
        }
        other => Err(fail(format!("unknown signal kind {other}"))),
    }
}

fn value_corrections(corrections: Vec<Value>) -> Value {
    if corrections.is_empty() {
        json!({"resolution": "unresolved"})
    } else {
        json!({"resolution": "value_correction", "corrections": corrections})
    }
}

/// The answer a faithful model writes for a result: the bare values.
fn render_rows(rows: &Value) -> String {
    let rows = rows.as_array().cloned().unwrap_or_default();
    if rows.is_empty() {
        return "no matching records".into();
    }
    rows.iter()
        .map(|r| {
            r.as_array()
                .into_iter()
                .flatten()
                .map(|c| json_scalar_text(c).unwrap_or_else(|| "null".into()))
                .collect::<Vec<_>>()
                .join(" | ")
        })
        .collect::<Vec<_>>()
        .join(", ")
}
