use std::collections::BTreeMap;

use serde_json::Value;

use super::{prompts, FieldType, Gateway, GatewayError, OutputContract, ProviderRole, Role, StructuredRequest};
use crate::clear::extract::{parse_row, table_json, tuple_summary};
use crate::corpus::Chunk;
use crate::model::{CandidateTuple, TableDef, TupleStatus, Value as TypedValue};

/// A committee re-extraction with the per-attribute vote shares.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitteeOutcome {
    pub tuple: CandidateTuple,
    /// Fraction of responding members that agreed with the winning value.
    pub agreement: BTreeMap<String, f64>,
    pub responding: usize,
}

pub(crate) fn committee_request(
    member: &ProviderRole,
    chunk: &Chunk,
    table: &TableDef,
    focus: Option<&CandidateTuple>,
) -> StructuredRequest {
    StructuredRequest::new(
        Role::CommitteeMember,
        prompts::COMMITTEE_EXTRACT,
        OutputContract::new()
            .required("values", FieldType::Object)
            .optional("confidence", FieldType::Number),
    )
    .member(member.endpoint.model.clone())
    .var("table_name", table.name.clone())
    .var("table", table_json(table))
    .var("focus", focus.map(tuple_summary).unwrap_or(Value::Null))
    .var("passage", chunk.text.clone())
}

/// Picks the winning value for one attribute. Majority wins; a tie that
/// includes the first member's value goes to that value, any other tie to
/// the smallest tied value. The result is therefore unchanged by any
/// reordering of members that keeps the first one in place.
fn vote(proposals: &[Option<TypedValue>]) -> (Option<TypedValue>, usize) {
    let mut counts: BTreeMap<&Option<TypedValue>, usize> = BTreeMap::new();
    for p in proposals {
        *counts.entry(p).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let first = &proposals[0];
    if counts.get(first).copied() == Some(best) {
        return (first.clone(), best);
    }
    let winner = counts
        .iter()
        .find(|(_, &c)| c == best)
        .map(|(v, _)| (*v).clone())
        .unwrap_or(None);
    (winner, best)
}

/// Asks every member to re-extract the row and takes a per-attribute
/// majority vote. Members whose reply breaks its contract, or whose call
/// fails, are left out of the vote; the call fails only when no member
/// answers or when contract failures make up a majority.
pub fn committee_extract(
    gateway: &Gateway,
    chunk: &Chunk,
    table: &TableDef,
    members: &[ProviderRole],
    focus: Option<&CandidateTuple>,
) -> Result<CommitteeOutcome, GatewayError> {
    if members.is_empty() {
        return Err(GatewayError::Config("committee has no members".into()));
    }
    let mut rows = Vec::new();
    let mut contract_failures = 0;
    let mut last_error = None;
    for member in members {
        let req = committee_request(member, chunk, table, focus);
        match gateway.complete_structured(&req) {
            Ok(reply) => rows.push(parse_row(&reply.value["values"], reply.value.get("confidence"), table)),
            Err(e) => {
                if matches!(e, GatewayError::Contract { .. }) {
                    contract_failures += 1;
                }
                last_error = Some(e);
            }
        }
    }
    if rows.is_empty() || contract_failures * 2 > members.len() {
        return Err(last_error.expect("a member failed"));
    }

    let id = focus
        .map(|t| t.tuple_id.clone())
        .unwrap_or_else(|| format!("{}:committee", crate::clear::extract::tuple_id(chunk, &table.name, 0)));
    let mut tuple = CandidateTuple::new(id, table.name.clone(), chunk.location.clone());
    let mut agreement = BTreeMap::new();
    for attr in &table.attributes {
        let proposals: Vec<Option<TypedValue>> = rows
            .iter()
            .map(|r| r.values.get(&attr.name).cloned().flatten())
            .collect();
        let (winner, votes) = vote(&proposals);
        if winner.is_some() {
            if let Some(raw) = rows
                .iter()
                .find(|r| r.values.get(&attr.name).cloned().flatten() == winner)
                .and_then(|r| r.raw.get(&attr.name))
            {
                tuple.raw_values.insert(attr.name.clone(), raw.clone());
            }
        }
        agreement.insert(attr.name.clone(), votes as f64 / rows.len() as f64);
        tuple.values.insert(attr.name.clone(), winner);
    }
    tuple.confidence = agreement.values().copied().reduce(f64::min);
    tuple.status = TupleStatus::Corrected;
    tuple.notes.push(format!("committee re-extraction by {} members", rows.len()));
    Ok(CommitteeOutcome {
        tuple,
        agreement,
        responding: rows.len(),
    })
}
