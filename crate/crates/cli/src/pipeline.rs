//! Stages of a run and the end-to-end driver. Every stage reads its inputs
//! from memory or from the output directory and writes its artifacts there.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value as Json};

use docstruct_core::clear::correct::DEFAULT_BACKTRACK_K;
use docstruct_core::clear::{
    commit_unchecked, extract_all, fit_calibrator, load_calibration, run_clear, validate_constraints, ClearReport,
    ConfidenceGate, CorrectionContext, RelationalStore, StagingStore, MAX_CORRECTION_CYCLES,
};
use docstruct_core::corpus::{Chunk, Corpus};
use docstruct_core::discovery::{run_discovery, DiscoverySession};
use docstruct_core::gateway::{
    prompts, FieldType, Gateway, HttpProvider, OutputContract, Provider, ReplayProvider, Role, StructuredRequest,
};
use docstruct_core::model::{sha256_hex, CandidateTuple, Constraint, ConstraintOrigin, Query, Schema, Violation};
use docstruct_core::relational::{
    answer_query, Answer, Citation, Plan, Reasoning, ResultSet, Synthesis,
};

use crate::config::PipelineConfig;

pub const CORPUS_DIR: &str = "corpus";
pub const DB_DIR: &str = "db";
pub const SCHEMA_FILE: &str = "schema.json";
pub const SESSION_FILE: &str = "session.json";
pub const STAGING_FILE: &str = "staging.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A failed stage and why.
#[derive(Debug, Clone, PartialEq)]
pub struct StageError {
    pub stage: &'static str,
    pub cause: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.cause)
    }
}

impl std::error::Error for StageError {}

fn fail<E: fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        cause: e.to_string(),
    }
}

fn write_file(stage: &'static str, path: &Path, body: impl AsRef<[u8]>) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(fail(stage))?;
    }
    fs::write(path, body).map_err(|e| StageError {
        stage,
        cause: format!("{}: {e}", path.display()),
    })
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

/// The provider the config asks for: a replay file, or HTTP endpoints.
pub fn build_provider(cfg: &PipelineConfig) -> Result<Arc<dyn Provider>, StageError> {
    let p = &cfg.providers;
    if let Some(path) = &p.replay {
        let replay = ReplayProvider::load_jsonl(path, p.replay_mode).map_err(fail("providers"))?;
        return Ok(Arc::new(replay));
    }
    if p.endpoints.is_empty() {
        return Err(StageError {
            stage: "providers",
            cause: "no provider configured".into(),
        });
    }
    let http = HttpProvider::new(p.endpoints.clone(), p.committee.clone()).map_err(fail("providers"))?;
    Ok(Arc::new(http))
}

pub fn build_gateway(cfg: &PipelineConfig, provider: Arc<dyn Provider>) -> Gateway {
    Gateway::with_limits(provider, cfg.providers.repair_retries, cfg.providers.max_in_flight)
}

/// Ingests the corpus and saves its index under `out/corpus`.
pub fn ingest(cfg: &PipelineConfig) -> Result<Corpus, StageError> {
    let path = cfg.corpus.as_ref().ok_or_else(|| StageError {
        stage: "ingest",
        cause: "no corpus path configured".into(),
    })?;
    let corpus = Corpus::ingest_path(path, cfg.chunking_params()).map_err(|e| StageError {
        stage: "ingest",
        cause: format!("{}: {e}", path.display()),
    })?;
    corpus.save(&cfg.out_dir.join(CORPUS_DIR)).map_err(fail("ingest"))?;
    Ok(corpus)
}

/// The saved index if there is one, otherwise a fresh ingest.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus, StageError> {
    let dir = cfg.out_dir.join(CORPUS_DIR);
    if dir.exists() {
        Corpus::load(&dir, Some(cfg.chunking_params())).map_err(fail("ingest"))
    } else {
        ingest(cfg)
    }
}

pub fn load_user_constraints(cfg: &PipelineConfig) -> Result<Vec<Constraint>, StageError> {
    let Some(path) = &cfg.constraints else {
        return Ok(Vec::new());
    };
    let text = fs::read_to_string(path).map_err(|e| StageError {
        stage: "constraints",
        cause: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| StageError {
        stage: "constraints",
        cause: format!("{}: {e}", path.display()),
    })
}

fn load_schema_file(stage: &'static str, path: &Path) -> Result<Schema, StageError> {
    let text = fs::read_to_string(path).map_err(|e| StageError {
        stage,
        cause: format!("{}: {e}", path.display()),
    })?;
    Schema::from_json(&text).map_err(|e| StageError {
        stage,
        cause: format!("{}: {e}", path.display()),
    })
}

/// Schema for the query: discovered, or read from the schema file when
/// discovery is ablated.
pub struct Discovered {
    pub schema: Schema,
    pub session: Option<DiscoverySession>,
}

pub fn discover(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    corpus: &Corpus,
    query: &Query,
    user_constraints: &[Constraint],
    warnings: &mut Vec<String>,
) -> Result<Discovered, StageError> {
    write_file("discover", &cfg.out_dir.join("query.json"), pretty(query))?;
    let out = if cfg.ablation.no_schema_discovery {
        let path = cfg.schema_file.as_ref().ok_or_else(|| StageError {
            stage: "discover",
            cause: "no_schema_discovery requires a schema file".into(),
        })?;
        Discovered {
            schema: load_schema_file("discover", path)?,
            session: None,
        }
    } else {
        let session = run_discovery(gateway, corpus, query, user_constraints, &cfg.discovery_config())
            .map_err(fail("discover"))?;
        if let Some(f) = &session.failure {
            warnings.push(format!("discovery: {f}"));
        }
        write_file("discover", &cfg.out_dir.join(SESSION_FILE), session.to_json_pretty())?;
        Discovered {
            schema: session.final_schema().clone(),
            session: Some(session),
        }
    };
    write_file("discover", &cfg.out_dir.join(SCHEMA_FILE), out.schema.to_json_pretty())?;
    Ok(out)
}

/// Extracts over every chunk and writes the candidate tuples. A failed
/// extraction call fails the stage.
pub fn extract(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    corpus: &Corpus,
    schema: &Schema,
) -> Result<Vec<CandidateTuple>, StageError> {
    let chunks: Vec<&Chunk> = corpus.chunks.iter().collect();
    let outcome = extract_all(gateway, &chunks, schema);
    let report = json!({
        "chunks": chunks.len(),
        "calls": outcome.calls,
        "tuples": outcome.tuples.len(),
        "failed_tables": outcome.failed_tables,
        "notes": outcome.notes,
    });
    write_file("extract", &cfg.out_dir.join("extraction.json"), pretty(&report))?;
    if !outcome.failed_tables.is_empty() {
        return Err(StageError {
            stage: "extract",
            cause: outcome.notes.join("; "),
        });
    }
    write_tuples(&cfg.out_dir.join(STAGING_FILE), &outcome.tuples)?;
    Ok(outcome.tuples)
}

pub fn write_tuples(path: &Path, tuples: &[CandidateTuple]) -> Result<(), StageError> {
    let mut body = String::new();
    for t in tuples {
        body.push_str(&t.to_json().to_string());
        body.push('\n');
    }
    write_file("extract", path, body)
}

pub fn read_tuples(path: &Path, schema: &Schema) -> Result<Vec<CandidateTuple>, StageError> {
    let file = fs::File::open(path).map_err(|e| StageError {
        stage: "extract",
        cause: format!("{}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(fail("extract"))?;
        if line.trim().is_empty() {
            continue;
        }
        let json: Json = serde_json::from_str(&line).map_err(|e| StageError {
            stage: "extract",
            cause: format!("{} line {}: {e}", path.display(), i + 1),
        })?;
        out.push(CandidateTuple::from_json(&json, schema).map_err(|e| StageError {
            stage: "extract",
            cause: format!("{} line {}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

/// The constraints enforced for this schema: user constraints that apply to
/// it, plus proposed ones when asked for. Inapplicable ones become warnings.
pub fn enforced_constraints(
    schema: &Schema,
    user: &[Constraint],
    proposed: &[Constraint],
    enforce_proposed: bool,
    warnings: &mut Vec<String>,
) -> Vec<Constraint> {
    let mut out: Vec<Constraint> = Vec::new();
    let proposed = proposed.iter().filter(|_| enforce_proposed);
    for c in user.iter().chain(proposed) {
        let problems = c.check(schema);
        if !problems.is_empty() {
            if c.origin == ConstraintOrigin::User {
                warnings.push(format!("skipped constraint {}: {}", c.constraint_id, problems.join("; ")));
            }
            continue;
        }
        if out.iter().any(|o| o.constraint_id == c.constraint_id) {
            warnings.push(format!("skipped duplicate constraint id {}", c.constraint_id));
            continue;
        }
        out.push(c.clone());
    }
    out
}

pub fn stage(schema: &Schema, constraints: Vec<Constraint>, tuples: Vec<CandidateTuple>) -> Result<StagingStore, StageError> {
    let mut store = StagingStore::new(schema.clone(), constraints).map_err(fail("validate"))?;
    for t in tuples {
        store.insert(t).map_err(fail("validate"))?;
    }
    Ok(store)
}

/// Constraint violations among staged tuples.
pub fn validate(cfg: &PipelineConfig, store: &StagingStore) -> Result<Vec<Violation>, StageError> {
    let violations = validate_constraints(store).map_err(fail("validate"))?;
    write_file("validate", &cfg.out_dir.join("violations.json"), pretty(&violations))?;
    Ok(violations)
}

pub fn confidence_gate(cfg: &PipelineConfig) -> Result<ConfidenceGate, StageError> {
    match &cfg.calibration {
        None => Ok(ConfidenceGate::default()),
        Some(path) => {
            let records = load_calibration(path).map_err(fail("clear"))?;
            let calibrator = fit_calibrator(&records, cfg.alpha).map_err(fail("clear"))?;
            Ok(ConfidenceGate::Conformal(calibrator))
        }
    }
}

/// Runs correction and commits, or commits unchecked when CLEAR is
/// ablated. Saves the database under `out/db`.
pub fn clear_and_commit(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    corpus: &Corpus,
    mut store: StagingStore,
) -> Result<RelationalStore, StageError> {
    let (db, report) = if cfg.ablation.no_clear {
        let db = commit_unchecked(&store);
        let report = ClearReport {
            cycles: Vec::new(),
            commit: db.report.clone(),
        };
        (db, report)
    } else {
        let gate = confidence_gate(cfg)?;
        let committee = cfg.providers.committee_roles();
        let ctx = CorrectionContext {
            gateway,
            corpus,
            committee: &committee,
            backtrack_k: DEFAULT_BACKTRACK_K,
        };
        run_clear(&ctx, &mut store, &gate, MAX_CORRECTION_CYCLES).map_err(fail("clear"))?
    };
    write_file("clear", &cfg.out_dir.join("clear_report.json"), pretty(&report))?;
    db.save(&cfg.out_dir.join(DB_DIR)).map_err(fail("commit"))?;
    Ok(db)
}

/// An answer with the plans that produced it, when there were any.
pub struct Answered {
    pub answer: Answer,
    pub plan: Option<Plan>,
    pub optimized: Option<Plan>,
}

fn provenance_json(result: &ResultSet, corpus: &Corpus) -> Json {
    let rows: Vec<Json> = result
        .rows
        .iter()
        .zip(&result.provenance.rows)
        .map(|(row, prov)| {
            let sources: Vec<Json> = prov
                .iter()
                .map(|e| {
                    json!({
                        "tuple_id": e.tuple_id,
                        "source": e.source,
                        "text": corpus.resolve_span(&e.source),
                    })
                })
                .collect();
            json!({
                "values": row.iter().map(|c| c.as_ref().map_or(Json::Null, |v| v.to_json())).collect::<Vec<_>>(),
                "sources": sources,
            })
        })
        .collect();
    json!({"columns": result.columns, "evidence": result.provenance.digest(), "rows": rows})
}

/// Asks the reasoning role directly, showing it the committed rows instead
/// of compiling a plan.
pub fn direct_answer(gateway: &Gateway, query: &Query, db: &RelationalStore, corpus: &Corpus) -> Result<Answer, StageError> {
    let rows: Vec<&CandidateTuple> = db.all_rows().collect();
    let passages: Vec<Json> = rows
        .iter()
        .map(|t| json!({"source": t.tuple_id, "text": json!({"table": t.table, "values": docstruct_core::model::values_to_json(&t.values)}).to_string()}))
        .collect();
    let req = StructuredRequest::new(
        Role::Reason,
        prompts::DIRECT_ANSWER,
        OutputContract::new().required("answer", FieldType::String),
    )
    .var("query", query.text.clone())
    .var("passages", Json::Array(passages));
    let reply = gateway.complete_structured(&req).map_err(fail("reason"))?;
    let cites: Vec<Citation> = rows
        .iter()
        .map(|t| Citation {
            tuple_id: t.tuple_id.clone(),
            source: t.source.clone(),
            snippet: corpus.resolve_span(&t.source).unwrap_or_default().to_string(),
        })
        .collect();
    let result = ResultSet::default();
    Ok(Answer {
        text: reply.value["answer"].as_str().unwrap_or_default().to_string(),
        sql_text: String::new(),
        evidence: result.provenance.digest(),
        result,
        citations: cites,
        fallback: false,
        warnings: Vec::new(),
    })
}

/// Compiles, optimizes, executes and synthesizes, writing the plans, SQL,
/// result, answer and provenance.
pub fn answer(
    cfg: &PipelineConfig,
    gateway: &Gateway,
    corpus: &Corpus,
    db: &RelationalStore,
    query: &Query,
) -> Result<Answered, StageError> {
    let out = &cfg.out_dir;
    if cfg.ablation.no_structured_reasoning {
        let answer = direct_answer(gateway, query, db, corpus)?;
        write_file("reason", &out.join("answer.json"), answer.to_json_pretty())?;
        return Ok(Answered {
            answer,
            plan: None,
            optimized: None,
        });
    }
    let mode = if cfg.ablation.no_llm_synthesis {
        Synthesis::Template
    } else {
        Synthesis::Model
    };
    let Reasoning {
        plan,
        optimized,
        answer,
        ..
    } = answer_query(gateway, query, db, corpus, mode).map_err(fail("reason"))?;
    write_file("reason", &out.join("plan.json"), pretty(&plan))?;
    write_file("reason", &out.join("optimized_plan.json"), pretty(&optimized))?;
    write_file("reason", &out.join("query.sql"), format!("{}\n", answer.sql_text))?;
    write_file("reason", &out.join("result.json"), answer.result.to_json_pretty())?;
    write_file("reason", &out.join("result.csv"), answer.result.to_csv())?;
    write_file("synthesize", &out.join("answer.json"), answer.to_json_pretty())?;
    write_file(
        "synthesize",
        &out.join("provenance.json"),
        pretty(&provenance_json(&answer.result, corpus)),
    )?;
    Ok(Answered {
        answer,
        plan: Some(plan),
        optimized: Some(optimized),
    })
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Writes `manifest.json`: config digest, a digest per artifact, and the
/// creation time.
pub fn write_manifest(cfg: &PipelineConfig, query: Option<&Query>, warnings: &[String]) -> Result<(), StageError> {
    let mut files = Vec::new();
    list_files(&cfg.out_dir, &cfg.out_dir, &mut files).map_err(fail("manifest"))?;
    let mut artifacts = BTreeMap::new();
    for f in files {
        let name = f.to_string_lossy().replace('\\', "/");
        if name == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(cfg.out_dir.join(&f)).map_err(fail("manifest"))?;
        artifacts.insert(name, sha256_hex(&bytes));
    }
    let manifest = json!({
        "config_digest": cfg.digest(),
        "query": query,
        "artifacts": artifacts,
        "warnings": warnings,
        "created_at": chrono::Utc::now().to_rfc3339(),
    });
    write_file("manifest", &cfg.out_dir.join(MANIFEST_FILE), pretty(&manifest))
}

/// Everything a run produced besides the files.
pub struct RunOutcome {
    pub answer: Answer,
    pub plan: Option<Plan>,
    pub optimized: Option<Plan>,
    pub schema: Schema,
    pub session: Option<DiscoverySession>,
    pub db: RelationalStore,
    pub corpus: Corpus,
    pub warnings: Vec<String>,
    /// Provider calls that failed outright, e.g. a missing replay digest.
    pub provider_errors: usize,
}

pub fn run_pipeline(cfg: &PipelineConfig, query: &Query) -> Result<RunOutcome, StageError> {
    cfg.validate().map_err(fail("config"))?;
    let provider = build_provider(cfg)?;
    run_pipeline_with(cfg, query, provider)
}

/// End-to-end run with a given provider. Stages run in order; the first
/// failure stops the run.
pub fn run_pipeline_with(cfg: &PipelineConfig, query: &Query, provider: Arc<dyn Provider>) -> Result<RunOutcome, StageError> {
    cfg.check().map_err(fail("config"))?;
    fs::create_dir_all(&cfg.out_dir).map_err(fail("config"))?;
    let gateway = build_gateway(cfg, provider);
    let mut warnings = Vec::new();

    let corpus = ingest(cfg)?;
    let user = load_user_constraints(cfg)?;
    let discovered = discover(cfg, &gateway, &corpus, query, &user, &mut warnings)?;
    let schema = discovered.schema;
    let tuples = extract(cfg, &gateway, &corpus, &schema)?;
    let proposed = discovered
        .session
        .as_ref()
        .map(|s| s.proposed_constraints.clone())
        .unwrap_or_default();
    let constraints = enforced_constraints(&schema, &user, &proposed, cfg.ablation.enforce_proposed, &mut warnings);
    let store = stage(&schema, constraints, tuples)?;
    validate(cfg, &store)?;
    let db = clear_and_commit(cfg, &gateway, &corpus, store)?;
    let answered = answer(cfg, &gateway, &corpus, &db, query)?;

    let calls = gateway.calls();
    let provider_errors = calls.iter().filter(|c| c.outcome == "provider_error").count();
    if provider_errors > 0 {
        warnings.push(format!("{provider_errors} provider calls failed"));
    }
    write_file("manifest", &cfg.out_dir.join("calls.json"), pretty(&calls))?;
    write_manifest(cfg, Some(query), &warnings)?;
    Ok(RunOutcome {
        answer: answered.answer,
        plan: answered.plan,
        optimized: answered.optimized,
        schema,
        session: discovered.session,
        db,
        corpus,
        warnings,
        provider_errors,
    })
}

/// Citations of an answer as printable lines.
pub fn citation_lines(answer: &Answer) -> Vec<String> {
    answer
        .citations
        .iter()
        .map(|c| format!("[{}] {}: {}", c.tuple_id, c.source, c.snippet.replace('\n', " ")))
        .collect()
}

pub fn load_db(cfg: &PipelineConfig) -> Result<RelationalStore, StageError> {
    RelationalStore::load(&cfg.out_dir.join(DB_DIR)).map_err(fail("commit"))
}

pub fn load_schema(cfg: &PipelineConfig) -> Result<Schema, StageError> {
    load_schema_file("discover", &cfg.out_dir.join(SCHEMA_FILE))
}

/// Executes SQL text against the saved database, without a model.
pub fn run_sql(db: &RelationalStore, sql: &str) -> Result<(Plan, ResultSet), StageError> {
    use docstruct_core::relational::{execute_plan, optimize_plan, parse_sql, TableStats};
    let plan = parse_sql(sql).map_err(fail("query"))?;
    plan.validate(&db.schema).map_err(fail("query"))?;
    let optimized = optimize_plan(&plan, &db.schema, &TableStats::from_store(db));
    let result = execute_plan(&optimized, db).map_err(fail("query"))?;
    Ok((optimized, result))
}
