use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::extract::{extraction_request, parse_row, tuple_summary};
use super::staging::StagingStore;
use super::ClearError;
use crate::corpus::Corpus;
use crate::gateway::{committee_extract, prompts, FieldType, Gateway, OutputContract, ProviderRole, Role, StructuredRequest};
use crate::model::{CandidateTuple, ConstraintKind, TupleStatus, Violation};

/// Chunks retrieved per backtracking or disambiguation lookup.
pub const DEFAULT_BACKTRACK_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    LowConfidence,
    LogicViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CommitteeReextract,
    Disambiguate,
    BacktrackRetrieve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Corrected,
    Rejected,
    Upheld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionDecision {
    pub tuple_ids: Vec<String>,
    pub trigger: Trigger,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint_id: Option<String>,
    pub outcome: Outcome,
    pub detail: String,
}

/// A decision before it has been carried out.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub tuple_ids: Vec<String>,
    pub trigger: Trigger,
    pub strategy: Strategy,
    pub constraint_id: Option<String>,
}

pub fn strategy_for(trigger: &Trigger) -> Strategy {
    match trigger {
        Trigger::LowConfidence => Strategy::CommitteeReextract,
        Trigger::LogicViolation(kind) => match kind.as_str() {
            "functional_dependency" => Strategy::Disambiguate,
            "foreign_key" => Strategy::BacktrackRetrieve,
            _ => Strategy::CommitteeReextract,
        },
    }
}

/// Maps low-confidence tuples and violations to strategies. Low-confidence
/// routes come first in tuple-id order, then violations in their given
/// order. A tuple gets at most one committee re-extraction per pass.
pub fn route(store: &StagingStore, violations: &[Violation], low_confidence: &[String]) -> Vec<Route> {
    let kinds: BTreeMap<&str, &ConstraintKind> = store
        .constraints()
        .iter()
        .map(|c| (c.constraint_id.as_str(), &c.kind))
        .collect();
    let mut routes = Vec::new();
    let mut committee: BTreeSet<String> = BTreeSet::new();
    let mut low: Vec<&String> = low_confidence.iter().collect();
    low.sort();
    low.dedup();
    for id in low {
        committee.insert(id.clone());
        routes.push(Route {
            tuple_ids: vec![id.clone()],
            trigger: Trigger::LowConfidence,
            strategy: Strategy::CommitteeReextract,
            constraint_id: None,
        });
    }
    for v in violations {
        let Some(kind) = kinds.get(v.constraint_id.as_str()) else {
            continue;
        };
        let trigger = Trigger::LogicViolation(kind.label().to_string());
        let strategy = strategy_for(&trigger);
        let ids: Vec<String> = v.offending_tuple_ids.iter().cloned().collect();
        if strategy == Strategy::CommitteeReextract && !committee.insert(ids[0].clone()) {
            continue;
        }
        routes.push(Route {
            tuple_ids: ids,
            trigger,
            strategy,
            constraint_id: Some(v.constraint_id.clone()),
        });
    }
    routes
}

/// What correction strategies need besides the store.
pub struct CorrectionContext<'a> {
    pub gateway: &'a Gateway,
    pub corpus: &'a Corpus,
    pub committee: &'a [ProviderRole],
    pub backtrack_k: usize,
}

/// Carries out each route in order, mutating the store.
pub fn apply_routes(
    ctx: &CorrectionContext<'_>,
    store: &mut StagingStore,
    routes: &[Route],
) -> Result<Vec<CorrectionDecision>, ClearError> {
    let mut decisions = Vec::new();
    for r in routes {
        let (outcome, detail) = match r.strategy {
            Strategy::CommitteeReextract => committee_reextract(ctx, store, &r.tuple_ids[0])?,
            Strategy::Disambiguate => disambiguate(ctx, store, r)?,
            Strategy::BacktrackRetrieve => backtrack(ctx, store, r)?,
        };
        decisions.push(CorrectionDecision {
            tuple_ids: r.tuple_ids.clone(),
            trigger: r.trigger.clone(),
            strategy: r.strategy,
            constraint_id: r.constraint_id.clone(),
            outcome,
            detail,
        });
    }
    Ok(decisions)
}

/// Routes and then applies corrections for one staging pass.
pub fn route_corrections(
    ctx: &CorrectionContext<'_>,
    store: &mut StagingStore,
    violations: &[Violation],
    low_confidence: &[String],
) -> Result<Vec<CorrectionDecision>, ClearError> {
    let routes = route(store, violations, low_confidence);
    apply_routes(ctx, store, &routes)
}

fn reject_all(store: &mut StagingStore, ids: &[String], note: &str) -> Result<(), ClearError> {
    for id in ids {
        store.update(id, |t| {
            t.status = TupleStatus::Rejected;
            t.notes.push(note.to_string());
        })?;
    }
    Ok(())
}

fn committee_reextract(
    ctx: &CorrectionContext<'_>,
    store: &mut StagingStore,
    tuple_id: &str,
) -> Result<(Outcome, String), ClearError> {
    let tuple = store
        .get(tuple_id)
        .cloned()
        .ok_or_else(|| ClearError::Format(format!("unknown tuple {tuple_id}")))?;
    if !tuple.status.is_live() {
        return Ok((Outcome::Rejected, "already rejected".into()));
    }
    let table = store.schema().table(&tuple.table).cloned().expect("staged table exists");
    let Some(chunk) = ctx.corpus.chunk(&tuple.source) else {
        reject_all(store, &[tuple_id.to_string()], "source chunk not found")?;
        return Ok((Outcome::Rejected, format!("source chunk {} not found", tuple.source)));
    };
    match committee_extract(ctx.gateway, chunk, &table, ctx.committee, Some(&tuple)) {
        Err(e) => {
            let note = format!("committee failed: {e}");
            reject_all(store, &[tuple_id.to_string()], &note)?;
            Ok((Outcome::Rejected, note))
        }
        Ok(out) => {
            let mut changed = Vec::new();
            for (attr, new) in &out.tuple.values {
                if tuple.values.get(attr).cloned().flatten() != *new {
                    changed.push(attr.clone());
                }
            }
            let outcome = if changed.is_empty() {
                Outcome::Upheld
            } else {
                Outcome::Corrected
            };
            let detail = if changed.is_empty() {
                format!("committee of {} upheld the values", out.responding)
            } else {
                format!("committee of {} changed {}", out.responding, changed.join(", "))
            };
            store.update(tuple_id, |t| {
                if !changed.is_empty() {
                    t.values = out.tuple.values.clone();
                    t.raw_values = out.tuple.raw_values.clone();
                    t.status = TupleStatus::Corrected;
                } else if t.status != TupleStatus::Corrected {
                    t.status = TupleStatus::Accepted;
                }
                t.notes.push(detail.clone());
            })?;
            Ok((outcome, detail))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Verdict {
    Pick(String),
    Backtrack,
    Unresolved,
}

fn parse_verdict(reply: &Value, group: &[String]) -> Result<Verdict, String> {
    match reply["decision"].as_str() {
        Some("pick") => {
            let winner = reply["winner"].as_str().ok_or("decision pick needs a winner")?;
            if group.iter().any(|g| g == winner) {
                Ok(Verdict::Pick(winner.to_string()))
            } else {
                Err(format!("winner {winner} is not one of {}", group.join(", ")))
            }
        }
        Some("backtrack") => Ok(Verdict::Backtrack),
        Some("unresolved") => Ok(Verdict::Unresolved),
        other => Err(format!("unknown decision {other:?}")),
    }
}

pub(crate) fn disambiguation_request(
    table: &str,
    attribute: &str,
    records: &[CandidateTuple],
    passages: Vec<Value>,
    evidence: Vec<Value>,
) -> StructuredRequest {
    StructuredRequest::new(
        Role::Verifier,
        prompts::DISAMBIGUATE,
        OutputContract::new()
            .required("decision", FieldType::String)
            .optional("winner", FieldType::String),
    )
    .var("table_name", table)
    .var("attribute", attribute)
    .var("records", Value::Array(records.iter().map(tuple_summary).collect()))
    .var("passages", Value::Array(passages))
    .var("evidence", Value::Array(evidence))
}

fn passage(location: &crate::model::ChunkRef, text: &str) -> Value {
    json!({"source": location.to_string(), "text": text})
}

fn disambiguate(
    ctx: &CorrectionContext<'_>,
    store: &mut StagingStore,
    r: &Route,
) -> Result<(Outcome, String), ClearError> {
    let constraint = store
        .constraints()
        .iter()
        .find(|c| Some(&c.constraint_id) == r.constraint_id.as_ref())
        .cloned()
        .expect("routed constraint exists");
    let ConstraintKind::FunctionalDependency {
        table,
        determinant,
        dependent,
    } = &constraint.kind
    else {
        unreachable!("disambiguation routes come from functional dependencies");
    };
    let group: Vec<CandidateTuple> = r
        .tuple_ids
        .iter()
        .filter_map(|id| store.get(id))
        .filter(|t| t.status.is_live())
        .cloned()
        .collect();
    let distinct: BTreeSet<_> = group.iter().filter_map(|t| t.value(dependent)).collect();
    if distinct.len() < 2 {
        return Ok((Outcome::Corrected, "conflict already cleared".into()));
    }
    let ids: Vec<String> = group.iter().map(|t| t.tuple_id.clone()).collect();
    let mut seen = BTreeSet::new();
    let passages: Vec<Value> = group
        .iter()
        .filter(|t| seen.insert(t.source.clone()))
        .filter_map(|t| ctx.corpus.chunk(&t.source))
        .map(|c| passage(&c.location, &c.text))
        .collect();

    let ask = |evidence: Vec<Value>| {
        let req = disambiguation_request(table, dependent, &group, passages.clone(), evidence);
        ctx.gateway.complete_with(&req, 1, |v| parse_verdict(v, &ids)).map(|(v, _)| v)
    };
    let mut verdict = ask(Vec::new());
    let mut backtracked = false;
    if verdict == Ok(Verdict::Backtrack) {
        backtracked = true;
        let mut query = vec![table.clone(), dependent.replace('_', " ")];
        for a in determinant {
            if let Some(v) = group[0].value(a) {
                query.push(group[0].raw_values.get(a).cloned().unwrap_or_else(|| v.render()));
            }
        }
        let evidence: Vec<Value> = ctx
            .corpus
            .retrieve(&query.join(" "), ctx.backtrack_k)
            .map(|hits| {
                hits.into_iter()
                    .filter(|(c, _)| !seen.contains(&c.location))
                    .map(|(c, _)| passage(&c.location, &c.text))
                    .collect()
            })
            .unwrap_or_default();
        verdict = ask(evidence);
    }
    let suffix = if backtracked { " after backtracking" } else { "" };
    match verdict {
        Err(e) => {
            let note = format!("verifier failed: {e}");
            reject_all(store, &ids, &note)?;
            Ok((Outcome::Rejected, note))
        }
        Ok(Verdict::Pick(winner)) => {
            let winning = store.get(&winner).and_then(|t| t.value(dependent).cloned());
            let mut rejected = Vec::new();
            for t in &group {
                if t.tuple_id == winner {
                    store.update(&winner, |t| {
                        t.status = TupleStatus::Corrected;
                        t.notes.push(format!("chosen by verifier{suffix}"));
                    })?;
                } else if t.value(dependent).cloned() != winning {
                    rejected.push(t.tuple_id.clone());
                }
            }
            reject_all(store, &rejected, &format!("lost disambiguation to {winner}"))?;
            Ok((
                Outcome::Corrected,
                format!("verifier picked {winner}{suffix}; rejected {}", rejected.join(", ")),
            ))
        }
        Ok(_) => Ok((Outcome::Upheld, format!("verifier left the conflict unresolved{suffix}"))),
    }
}

fn backtrack(ctx: &CorrectionContext<'_>, store: &mut StagingStore, r: &Route) -> Result<(Outcome, String), ClearError> {
    let constraint = store
        .constraints()
        .iter()
        .find(|c| Some(&c.constraint_id) == r.constraint_id.as_ref())
        .cloned()
        .expect("routed constraint exists");
    let ConstraintKind::ForeignKey { child, parent } = &constraint.kind else {
        unreachable!("backtracking routes come from foreign keys");
    };
    let child_tuple = store.get(&r.tuple_ids[0]).cloned().expect("routed tuple exists");
    let Some(wanted) = child_tuple.value(&child.attribute).cloned() else {
        return Ok((Outcome::Upheld, "child value is null".into()));
    };
    let matches = |t: &CandidateTuple| {
        t.value(&parent.attribute)
            .is_some_and(|v| v.compare(&wanted) == Some(std::cmp::Ordering::Equal))
    };
    if store.rows(&parent.table).iter().any(|t| t.status.is_live() && matches(t)) {
        return Ok((Outcome::Corrected, "parent already staged".into()));
    }
    let parent_def = store.schema().table(&parent.table).cloned().expect("parent table exists");
    let surface = child_tuple
        .raw_values
        .get(&child.attribute)
        .cloned()
        .unwrap_or_else(|| wanted.render());
    let query = format!("{} {} {}", parent.table, parent.attribute.replace('_', " "), surface);
    let hits = match ctx.corpus.retrieve(&query, ctx.backtrack_k) {
        Ok(hits) => hits,
        Err(e) => return Ok((Outcome::Upheld, format!("backtracking retrieval failed: {e}"))),
    };
    for (chunk, _) in hits {
        let req = extraction_request(chunk, &parent_def);
        let reply = match ctx.gateway.complete_structured(&req) {
            Ok(reply) => reply,
            Err(e) => {
                let note = format!("backtracking extraction failed: {e}");
                reject_all(store, &r.tuple_ids, &note)?;
                return Ok((Outcome::Rejected, note));
            }
        };
        let rows = reply.value["tuples"].as_array().cloned().unwrap_or_default();
        for (i, row) in rows.iter().enumerate() {
            let (values, confidence) = match row.get("values") {
                Some(v) => (v.clone(), row.get("confidence").cloned()),
                None => (row.clone(), None),
            };
            let parsed = parse_row(&values, confidence.as_ref(), &parent_def);
            let id = format!(
                "{}:{}:{}:b{}",
                chunk.location.doc_id, chunk.location.chunk_index, parent.table, i
            );
            let mut tuple = CandidateTuple::new(id.clone(), parent.table.clone(), chunk.location.clone());
            tuple.values = parsed.values;
            tuple.raw_values = parsed.raw;
            tuple.confidence = parsed.confidence;
            tuple.notes = parsed.notes;
            tuple.notes.push(format!("found by backtracking for {}", child_tuple.tuple_id));
            if matches(&tuple) && !store.contains(&id) {
                store.insert(tuple)?;
                return Ok((Outcome::Corrected, format!("staged parent {id} from {}", chunk.location)));
            }
        }
    }
    Ok((Outcome::Upheld, format!("no {} row for {surface} found", parent.table)))
}
