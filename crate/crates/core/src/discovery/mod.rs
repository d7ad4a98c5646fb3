//! Query-specific schema discovery.
//!
//! An initial schema is hypothesized from a sample of chunks, then refined
//! in rounds: probe extraction over more chunks, uncertainty signals,
//! clarification questions answered by retrieval, and validated schema
//! edits. The loop stops when the schema is stable with no critical signal
//! left, when every question was answered, or after `max_iterations`.

pub mod edits;
pub mod signals;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use edits::{apply_batch, apply_edit, BatchOutcome, SchemaEdit};
pub use signals::{detect_signals, resolve_concept, Severity, SignalKind, UncertaintySignal};

use crate::clear::extract::{extract_all, table_json};
use crate::corpus::{Chunk, Corpus, CorpusError, SampleMode, DEFAULT_SAMPLE_SIZE};
use crate::gateway::{prompts, FieldType, Gateway, GatewayError, OutputContract, PromptTemplate, Role, StructuredRequest};
use crate::model::{
    json_scalar_text, normalize_value, schema_fingerprint, values_to_json, validate_schema, CandidateTuple, ChunkRef, Constraint,
    ConstraintOrigin, Query, Schema, TupleStatus,
};

pub const DEFAULT_MAX_ITERATIONS: usize = 4;
pub const DEFAULT_PROBE_BREADTH: usize = 40;
pub const DEFAULT_CHUNKS_PER_QUESTION: usize = 6;
/// Probe rows shown to the model in a refine pass.
const REFINE_TUPLE_LIMIT: usize = 60;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscoveryMode {
    #[default]
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Converged,
    AllAnswered,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub mode: DiscoveryMode,
    pub max_iterations: usize,
    pub probe_breadth: usize,
    pub chunks_per_question: usize,
    pub sample_size: usize,
    pub sample_mode: SampleMode,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            mode: DiscoveryMode::Active,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            probe_breadth: DEFAULT_PROBE_BREADTH,
            chunks_per_question: DEFAULT_CHUNKS_PER_QUESTION,
            sample_size: DEFAULT_SAMPLE_SIZE,
            sample_mode: SampleMode::Biased,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub question_id: String,
    pub text: String,
    pub signal: UncertaintySignal,
    pub retrieval_hint: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueCorrection {
    pub tuple_id: String,
    pub attribute: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "resolution", rename_all = "snake_case")]
pub enum Resolution {
    SchemaEdit { edits: Vec<SchemaEdit> },
    ValueCorrection { corrections: Vec<ValueCorrection> },
    Unresolved,
}

impl Resolution {
    pub fn is_resolved(&self) -> bool {
        !matches!(self, Resolution::Unresolved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEvidence {
    pub question_id: String,
    pub chunks: Vec<ChunkRef>,
    pub resolution: Resolution,
}

/// Result of the initial hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialSchema {
    pub schema: Schema,
    pub query_concepts: Vec<String>,
    pub proposed_constraints: Vec<Constraint>,
    pub retries_used: usize,
}

fn tuple_summary(t: &CandidateTuple) -> Value {
    json!({"tuple_id": t.tuple_id, "table": t.table, "values": values_to_json(&t.values)})
}

fn passages(chunks: &[&Chunk]) -> Value {
    Value::Array(
        chunks
            .iter()
            .map(|c| json!({"source": c.location.to_string(), "text": c.text}))
            .collect(),
    )
}

fn parse_initial(reply: &Value) -> Result<(Schema, Vec<String>, Vec<Constraint>), String> {
    let mut schema: Schema = serde_json::from_value(json!({
        "tables": reply["tables"],
        "links": reply.get("links").cloned().unwrap_or(json!([])),
    }))
    .map_err(|e| format!("schema does not parse: {e}"))?;
    schema.version = 0;
    if schema.tables.is_empty() {
        return Err("schema has no tables".into());
    }
    let problems = validate_schema(&schema);
    if !problems.is_empty() {
        return Err(format!("invalid schema: {}", problems.join("; ")));
    }
    let concepts = reply
        .get("query_concepts")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|c| c.as_str().map(str::to_string)).collect())
        .unwrap_or_default();
    let constraints = reply
        .get("constraints")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|c| serde_json::from_value::<Constraint>(c.clone()).ok())
                .filter(|c| c.check(&schema).is_empty())
                .map(|mut c| {
                    c.origin = ConstraintOrigin::Proposed;
                    c
                })
                .collect()
        })
        .unwrap_or_default();
    Ok((schema, concepts, constraints))
}

/// Asks the schema role for S_0. A reply that parses but fails schema
/// validation gets one repair round.
pub fn init_schema(gateway: &Gateway, query: &Query, sample: &[&Chunk]) -> Result<InitialSchema, DiscoveryError> {
    if sample.is_empty() {
        return Err(DiscoveryError::EmptySample);
    }
    let req = StructuredRequest::new(
        Role::Schema,
        prompts::SCHEMA_INIT,
        OutputContract::new()
            .required("tables", FieldType::Array)
            .optional("links", FieldType::Array)
            .optional("query_concepts", FieldType::Array)
            .optional("constraints", FieldType::Array),
    )
    .var("query", query.text.clone())
    .var("sample", passages(sample));
    let ((schema, query_concepts, proposed_constraints), reply) = gateway.complete_with(&req, 1, parse_initial)?;
    Ok(InitialSchema {
        schema,
        query_concepts,
        proposed_constraints,
        retries_used: reply.retries_used,
    })
}

/// Chunks probed with the current schema: the top `breadth` by retrieval
/// against the query.
pub fn probe_chunks<'a>(corpus: &'a Corpus, query: &Query, breadth: usize) -> Result<Vec<&'a Chunk>, DiscoveryError> {
    if breadth == 0 || corpus.chunks.is_empty() {
        return Ok(Vec::new());
    }
    Ok(corpus.retrieve(&query.text, breadth)?.into_iter().map(|(c, _)| c).collect())
}

/// Extracts probe tuples, all left pending.
pub fn probe_schema(gateway: &Gateway, schema: &Schema, chunks: &[&Chunk]) -> Vec<CandidateTuple> {
    let mut tuples = extract_all(gateway, chunks, schema).tuples;
    for t in &mut tuples {
        t.status = TupleStatus::Pending;
    }
    tuples
}

fn question_template(kind: &SignalKind) -> PromptTemplate {
    match kind {
        SignalKind::AlignmentConflict { .. } => prompts::ASK_ALIGNMENT_CONFLICT,
        SignalKind::DistributionAnomaly { .. } => prompts::ASK_DISTRIBUTION_ANOMALY,
        SignalKind::MissingRelationship { .. } => prompts::ASK_MISSING_RELATIONSHIP,
    }
}

fn schema_json(schema: &Schema) -> Value {
    serde_json::to_value(schema).expect("schema serializes")
}

/// One question per critical signal, in signal order.
pub fn generate_questions(
    gateway: &Gateway,
    signals: &[UncertaintySignal],
    schema: &Schema,
    iteration: usize,
) -> Result<Vec<ClarificationQuestion>, GatewayError> {
    let mut critical: Vec<&UncertaintySignal> = signals.iter().filter(|s| s.is_critical()).collect();
    critical.sort_by_key(|s| (s.kind.rank(), serde_json::to_string(&s.kind).expect("signal serializes")));
    let mut out = Vec::new();
    for (i, signal) in critical.into_iter().enumerate() {
        let req = StructuredRequest::new(
            Role::Schema,
            question_template(&signal.kind),
            OutputContract::new().required("question", FieldType::String),
        )
        .var("schema", schema_json(schema))
        .var("signal", serde_json::to_value(signal).expect("signal serializes"));
        let (text, _) = gateway.complete_with(&req, 1, |v| {
            let text = v["question"].as_str().unwrap_or_default().trim().to_string();
            if text.is_empty() {
                Err("question is empty".to_string())
            } else {
                Ok(text)
            }
        })?;
        out.push(ClarificationQuestion {
            question_id: format!("k{iteration}-q{i}"),
            text,
            signal: signal.clone(),
            retrieval_hint: signal.kind.surface_terms(),
        });
    }
    Ok(out)
}

fn parse_resolution(v: &Value) -> Result<Resolution, String> {
    serde_json::from_value(v.clone()).map_err(|e| format!("resolution does not parse: {e}"))
}

/// Retrieves evidence for each question and asks the verifier to turn it
/// into a resolution.
pub fn answer_questions(
    gateway: &Gateway,
    corpus: &Corpus,
    questions: &[ClarificationQuestion],
    schema: &Schema,
    k: usize,
) -> Result<Vec<AnswerEvidence>, GatewayError> {
    let mut out = Vec::new();
    for q in questions {
        let text = std::iter::once(q.text.clone())
            .chain(q.retrieval_hint.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        let hits: Vec<&Chunk> = match corpus.retrieve(&text, k.max(1)) {
            Ok(hits) => hits.into_iter().map(|(c, _)| c).collect(),
            Err(_) => Vec::new(),
        };
        if hits.is_empty() {
            out.push(AnswerEvidence {
                question_id: q.question_id.clone(),
                chunks: Vec::new(),
                resolution: Resolution::Unresolved,
            });
            continue;
        }
        let req = StructuredRequest::new(
            Role::Verifier,
            prompts::RESOLVE_QUESTION,
            OutputContract::new()
                .required("resolution", FieldType::String)
                .optional("edits", FieldType::Array)
                .optional("corrections", FieldType::Array),
        )
        .var("question", q.text.clone())
        .var("signal", serde_json::to_value(&q.signal).expect("signal serializes"))
        .var("schema", schema_json(schema))
        .var("passages", passages(&hits));
        let (resolution, _) = gateway.complete_with(&req, 1, parse_resolution)?;
        out.push(AnswerEvidence {
            question_id: q.question_id.clone(),
            chunks: hits.iter().map(|c| c.location.clone()).collect(),
            resolution,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaUpdate {
    pub schema: Schema,
    pub applied: Vec<String>,
    pub discarded: Vec<String>,
    pub constraints: Vec<Constraint>,
}

/// Applies schema-edit resolutions in evidence order, one atomic batch per
/// evidence item. The version always advances.
pub fn update_schema(schema: &Schema, evidence: &[AnswerEvidence]) -> SchemaUpdate {
    let mut next = schema.clone();
    let mut update = SchemaUpdate {
        schema: Schema::default(),
        applied: Vec::new(),
        discarded: Vec::new(),
        constraints: Vec::new(),
    };
    for e in evidence {
        if let Resolution::SchemaEdit { edits } = &e.resolution {
            let out = apply_batch(&mut next, edits);
            update.applied.extend(out.applied);
            update.discarded.extend(out.discarded);
            update.constraints.extend(out.constraints.into_iter().map(|mut c| {
                c.origin = ConstraintOrigin::Proposed;
                c
            }));
        }
    }
    next.version = schema.version + 1;
    update.schema = next;
    update
}

/// Applies value corrections to probe tuples; returns how many applied.
pub fn apply_corrections(tuples: &mut [CandidateTuple], schema: &Schema, corrections: &[ValueCorrection]) -> usize {
    let mut applied = 0;
    for c in corrections {
        let Some(t) = tuples.iter_mut().find(|t| t.tuple_id == c.tuple_id) else {
            continue;
        };
        let Some(attr) = schema.table(&t.table).and_then(|tab| tab.attribute(&c.attribute)) else {
            continue;
        };
        let value = match json_scalar_text(&c.value) {
            None => None,
            Some(text) => match normalize_value(&text, attr.datatype) {
                Ok(v) => v,
                Err(_) => continue,
            },
        };
        t.values.insert(c.attribute.clone(), value);
        t.notes.push(format!("corrected {} during discovery", c.attribute));
        applied += 1;
    }
    applied
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaVersion {
    pub schema: Schema,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub k: usize,
    pub probe_chunks: usize,
    pub probe_tuples: Vec<Value>,
    pub signals: Vec<UncertaintySignal>,
    pub questions: Vec<ClarificationQuestion>,
    pub evidence: Vec<AnswerEvidence>,
    pub applied_edits: Vec<String>,
    pub discarded_edits: Vec<String>,
    pub corrections_applied: usize,
}

/// Audit record of one discovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySession {
    pub query: Query,
    pub mode: DiscoveryMode,
    pub query_concepts: Vec<String>,
    pub history: Vec<SchemaVersion>,
    pub iterations: Vec<IterationLog>,
    pub proposed_constraints: Vec<Constraint>,
    pub corrections: Vec<ValueCorrection>,
    pub k: usize,
    pub terminal_reason: TerminalReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub notes: Vec<String>,
}

impl DiscoverySession {
    pub fn final_schema(&self) -> &Schema {
        &self.history.last().expect("history holds S_0").schema
    }

    /// Critical signals found by the last probe.
    pub fn residual_critical(&self) -> Vec<&UncertaintySignal> {
        self.iterations
            .last()
            .map(|it| it.signals.iter().filter(|s| s.is_critical()).collect())
            .unwrap_or_default()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }
}

fn version(schema: Schema) -> SchemaVersion {
    let fingerprint = schema_fingerprint(&schema).expect("discovery keeps schemas valid");
    SchemaVersion { schema, fingerprint }
}

fn applicable(constraints: &[Constraint], schema: &Schema) -> Vec<Constraint> {
    constraints.iter().filter(|c| c.check(schema).is_empty()).cloned().collect()
}

/// Runs schema discovery for `query`. `constraints` are the user's
/// constraints, used for range checks on probe values.
pub fn run_discovery(
    gateway: &Gateway,
    corpus: &Corpus,
    query: &Query,
    constraints: &[Constraint],
    config: &DiscoveryConfig,
) -> Result<DiscoverySession, DiscoveryError> {
    let sample = corpus.sample_for_discovery(config.sample_size, query, config.sample_mode)?;
    let init = init_schema(gateway, query, &sample)?;
    let mut session = DiscoverySession {
        query: query.clone(),
        mode: config.mode,
        query_concepts: init.query_concepts,
        history: vec![version(init.schema)],
        iterations: Vec::new(),
        proposed_constraints: init.proposed_constraints,
        corrections: Vec::new(),
        k: 0,
        terminal_reason: TerminalReason::MaxIterations,
        failure: None,
        notes: vec!["a question counts as answered when its resolution is not unresolved".into()],
    };
    let probe = probe_chunks(corpus, query, config.probe_breadth)?;
    match config.mode {
        DiscoveryMode::Active => active_loop(gateway, corpus, constraints, config, &probe, &mut session),
        DiscoveryMode::Passive => passive_pass(gateway, constraints, &probe, &mut session),
    }
    Ok(session)
}

fn probe_and_detect(
    gateway: &Gateway,
    constraints: &[Constraint],
    probe: &[&Chunk],
    session: &DiscoverySession,
) -> (Vec<CandidateTuple>, IterationLog) {
    let schema = session.final_schema();
    let mut tuples = probe_schema(gateway, schema, probe);
    let corrections_applied = apply_corrections(&mut tuples, schema, &session.corrections);
    let all_constraints: Vec<Constraint> = constraints
        .iter()
        .chain(session.proposed_constraints.iter())
        .cloned()
        .collect();
    let signals = detect_signals(schema, &tuples, &applicable(&all_constraints, schema), &session.query_concepts);
    let log = IterationLog {
        k: session.k,
        probe_chunks: probe.len(),
        probe_tuples: tuples.iter().map(tuple_summary).collect(),
        signals,
        corrections_applied,
        ..IterationLog::default()
    };
    (tuples, log)
}

fn active_loop(
    gateway: &Gateway,
    corpus: &Corpus,
    constraints: &[Constraint],
    config: &DiscoveryConfig,
    probe: &[&Chunk],
    session: &mut DiscoverySession,
) {
    loop {
        let (_, mut log) = probe_and_detect(gateway, constraints, probe, session);
        let critical = log.signals.iter().any(UncertaintySignal::is_critical);
        if session.k >= 1 && !critical {
            let previous = session.iterations.last().expect("earlier iteration");
            let answered = !previous.questions.is_empty() && previous.evidence.iter().all(|e| e.resolution.is_resolved());
            let stable = session.history[session.k].fingerprint == session.history[session.k - 1].fingerprint;
            if answered || stable {
                session.terminal_reason = if answered {
                    TerminalReason::AllAnswered
                } else {
                    TerminalReason::Converged
                };
                session.iterations.push(log);
                return;
            }
        }
        if session.k >= config.max_iterations {
            session.terminal_reason = TerminalReason::MaxIterations;
            session.iterations.push(log);
            return;
        }
        let schema = session.final_schema().clone();
        let asked = generate_questions(gateway, &log.signals, &schema, session.k).and_then(|questions| {
            let evidence = answer_questions(gateway, corpus, &questions, &schema, config.chunks_per_question)?;
            Ok((questions, evidence))
        });
        let (questions, evidence) = match asked {
            Ok(x) => x,
            Err(e) => {
                session.failure = Some(format!("iteration {} failed: {e}", session.k));
                session.terminal_reason = TerminalReason::MaxIterations;
                session.iterations.push(log);
                return;
            }
        };
        let update = update_schema(&schema, &evidence);
        for e in &evidence {
            if let Resolution::ValueCorrection { corrections } = &e.resolution {
                session.corrections.extend(corrections.iter().cloned());
            }
        }
        session.proposed_constraints.extend(update.constraints);
        log.questions = questions;
        log.evidence = evidence;
        log.applied_edits = update.applied;
        log.discarded_edits = update.discarded;
        session.iterations.push(log);
        session.history.push(version(update.schema));
        session.k += 1;
    }
}

fn passive_pass(gateway: &Gateway, constraints: &[Constraint], probe: &[&Chunk], session: &mut DiscoverySession) {
    let (tuples, mut log) = probe_and_detect(gateway, constraints, probe, session);
    let schema = session.final_schema().clone();
    let shown: Vec<Value> = tuples.iter().take(REFINE_TUPLE_LIMIT).map(tuple_summary).collect();
    let tables: Vec<Value> = schema.tables.iter().map(table_json).collect();
    let req = StructuredRequest::new(
        Role::Schema,
        prompts::SCHEMA_REFINE,
        OutputContract::new().required("edits", FieldType::Array),
    )
    .var("query", session.query.text.clone())
    .var("schema", json!({"tables": tables, "links": schema.links}))
    .var("tuples", Value::Array(shown))
    .var("signals", serde_json::to_value(&log.signals).expect("signals serialize"));
    let edits = gateway.complete_with(&req, 1, |v| {
        serde_json::from_value::<Vec<SchemaEdit>>(v["edits"].clone()).map_err(|e| format!("edits do not parse: {e}"))
    });
    let mut next = schema.clone();
    match edits {
        Ok((edits, _)) => {
            let out = apply_batch(&mut next, &edits);
            log.applied_edits = out.applied;
            log.discarded_edits = out.discarded;
            session.proposed_constraints.extend(out.constraints.into_iter().map(|mut c| {
                c.origin = ConstraintOrigin::Proposed;
                c
            }));
        }
        Err(e) => session.failure = Some(format!("refine pass failed: {e}")),
    }
    next.version = schema.version + 1;
    let critical = log.signals.iter().any(UncertaintySignal::is_critical);
    session.iterations.push(log);
    session.history.push(version(next));
    session.k = 1;
    let stable = session.history[1].fingerprint == session.history[0].fingerprint;
    session.terminal_reason = if stable && !critical && session.failure.is_none() {
        TerminalReason::Converged
    } else {
        TerminalReason::MaxIterations
    };
}
