//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use docstruct_cli::config::PipelineConfig;
use docstruct_cli::eval::{eval_with, fixture_config, EvalReport, FixtureRun};
use docstruct_cli::pipeline::{build_gateway, build_provider, load_user_constraints, RunOutcome, StageError};
use docstruct_core::clear::validate_constraints;
use docstruct_core::corpus::Corpus;
use docstruct_core::discovery::{run_discovery, DiscoveryMode, DiscoverySession, SignalKind, TerminalReason};
use docstruct_core::gateway::ReplayProvider;
use docstruct_core::model::Query;
use docstruct_core::relational::{emit_sql, execute_plan, optimize_plan, parse_sql, TableStats};
use docstruct_core::Calibrator;
use docstruct_testkit::conformal::empirical_coverage;
use docstruct_testkit::constraints::{reference_violations, staging_store};
use docstruct_testkit::relational::{evaluate, plan, store};
use docstruct_testkit::rng;

const CONSTRAINT_STORES: u64 = 1000;
const CONSTRAINT_MAX_TUPLES: usize = 200;
const CONSTRAINT_BUDGET: Duration = Duration::from_secs(60);

const COVERAGE_ALPHAS: [f64; 3] = [0.05, 0.1, 0.2];
const COVERAGE_SLACK: f64 = 0.05;
const COVERAGE_CAL: usize = 500;
const COVERAGE_TEST: usize = 500;
const COVERAGE_TRIALS: usize = 1000;
const COVERAGE_BUDGET: Duration = Duration::from_secs(60);

const PLAN_SUITE: u64 = 500;
const PLAN_BUDGET: Duration = Duration::from_secs(120);

const K_MAX: usize = 4;
const E2E_FIXTURES: usize = 20;
const E2E_ACCURACY: f64 = 1.0;
const E2E_BUDGET: Duration = Duration::from_secs(120);

type Verdict = Result<String, String>;

fn fixtures_dir(set: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(set)
}

fn replay_eval(dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<(EvalReport, Vec<FixtureRun>), String> {
    eval_with(dir, cfg, out, |_, cfg| {
        cfg.validate().map_err(|e| StageError {
            stage: "config",
            cause: e.to_string(),
        })?;
        build_provider(cfg)
    })
}

fn set_config(set: &str) -> Result<PipelineConfig, String> {
    let cfg = fixture_config(&fixtures_dir(set))?;
    if !cfg.providers.endpoints.is_empty() || !cfg.providers.committee.is_empty() {
        return Err(format!("{set} config names network endpoints"));
    }
    Ok(cfg)
}

/// Runs shared between criteria.
#[derive(Default)]
struct Shared {
    scratch: Option<tempfile::TempDir>,
    e2e: Option<Vec<FixtureRun>>,
    adversarial: Option<Vec<FixtureRun>>,
}

impl Shared {
    fn scratch(&mut self) -> PathBuf {
        self.scratch
            .get_or_insert_with(|| tempfile::tempdir().expect("scratch dir"))
            .path()
            .to_path_buf()
    }
}

fn constraint_engine(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut kinds = BTreeSet::new();
    let mut violations = 0;
    for seed in 0..CONSTRAINT_STORES {
        let s = staging_store(&mut rng(seed), CONSTRAINT_MAX_TUPLES);
        kinds.extend(s.constraints().iter().map(|c| c.kind.label()));
        let got: BTreeSet<_> = validate_constraints(&s)
            .map_err(|e| format!("seed {seed}: {e}"))?
            .into_iter()
            .map(|v| (v.constraint_id, v.offending_tuple_ids))
            .collect();
        let want = reference_violations(&s);
        if got != want {
            return Err(format!("seed {seed}: engine found {} violations, reference {}", got.len(), want.len()));
        }
        violations += got.len();
    }
    let elapsed = start.elapsed();
    if kinds.len() != 4 {
        return Err(format!("only kinds {kinds:?} generated"));
    }
    if elapsed >= CONSTRAINT_BUDGET {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!("{CONSTRAINT_STORES} stores, {violations} violations, all four kinds, {elapsed:.1?}"))
}

fn conformal_coverage(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (i, alpha) in COVERAGE_ALPHAS.into_iter().enumerate() {
        let cov = empirical_coverage(&mut rng(i as u64), alpha, COVERAGE_CAL, COVERAGE_TEST, COVERAGE_TRIALS, |s, a| {
            Calibrator::fit(s, a).expect("calibration fits").q_hat()
        });
        let floor = 1.0 - alpha - COVERAGE_SLACK;
        if cov < floor {
            return Err(format!("alpha {alpha}: coverage {cov:.4} below {floor:.2}"));
        }
        parts.push(format!("alpha {alpha}: {cov:.4}"));
    }
    let elapsed = start.elapsed();
    if elapsed >= COVERAGE_BUDGET {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!("{}, {elapsed:.1?}", parts.join(", ")))
}

fn executor_vs_reference(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    for seed in 0..PLAN_SUITE {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let got = execute_plan(&p, &db).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = evaluate(&p, &db).map_err(|e| format!("seed {seed}: reference: {e}"))?;
        if got.sorted_rows() != want.multiset() {
            return Err(format!("seed {seed}: rows or provenance differ for {}", emit_sql(&p)));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= PLAN_BUDGET {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!("{PLAN_SUITE} plans, {elapsed:.1?}"))
}

fn optimizer_soundness(_: &mut Shared) -> Verdict {
    for seed in 0..PLAN_SUITE {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let stats = TableStats::from_store(&db);
        let o = optimize_plan(&p, &db.schema, &stats);
        o.validate(&db.schema).map_err(|e| format!("seed {seed}: optimized plan invalid: {e}"))?;
        let a = execute_plan(&p, &db).map_err(|e| format!("seed {seed}: {e}"))?;
        let b = execute_plan(&o, &db).map_err(|e| format!("seed {seed}: optimized: {e}"))?;
        if a.columns != b.columns || a.sorted_rows() != b.sorted_rows() {
            return Err(format!("seed {seed}: optimized result differs for {}", emit_sql(&p)));
        }
        if optimize_plan(&o, &db.schema, &stats) != o {
            return Err(format!("seed {seed}: second optimization changed the plan"));
        }
    }
    Ok(format!("{PLAN_SUITE} plans equal and idempotent"))
}

fn sql_round_trip(_: &mut Shared) -> Verdict {
    for seed in 0..PLAN_SUITE {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let sql = emit_sql(&p);
        let back = parse_sql(&sql).map_err(|e| format!("seed {seed}: {sql}: {e}"))?;
        let a = execute_plan(&p, &db).map_err(|e| format!("seed {seed}: {e}"))?;
        let b = execute_plan(&back, &db).map_err(|e| format!("seed {seed}: reparsed: {e}"))?;
        if a != b {
            return Err(format!("seed {seed}: reparsed plan differs: {sql}"));
        }
    }
    Ok(format!("{PLAN_SUITE} plans"))
}

fn discover_set(set: &str) -> Result<Vec<(String, String, DiscoverySession)>, String> {
    let dir = fixtures_dir(set);
    let cfg = set_config(set)?;
    let corpus =
        Corpus::ingest_path(cfg.corpus.as_ref().ok_or("no corpus")?, cfg.chunking_params()).map_err(|e| e.to_string())?;
    let user = load_user_constraints(&cfg).map_err(|e| e.to_string())?;
    let replay = cfg.providers.replay.clone().ok_or("no replay file")?;
    let provider = Arc::new(ReplayProvider::load_jsonl(&replay, cfg.providers.replay_mode)?);
    let mut out = Vec::new();
    for f in docstruct_cli::eval::load_fixtures(&dir)? {
        let q = Query::new(f.id.clone(), f.question.clone()).map_err(|e| e.to_string())?;
        let gw = build_gateway(&cfg, provider.clone());
        let session = run_discovery(&gw, &corpus, &q, &user, &cfg.discovery_config()).map_err(|e| format!("{}: {e}", f.id))?;
        if let Some(bad) = gw.calls().iter().find(|c| c.outcome != "ok") {
            return Err(format!("{}: call {} ended {}", f.id, bad.digest, bad.outcome));
        }
        out.push((f.id, f.category, session));
    }
    Ok(out)
}

fn planted_kind(category: &str) -> Option<&'static str> {
    match category {
        "conflict" => Some("alignment_conflict"),
        "anomaly" => Some("distribution_anomaly"),
        "multi-hop" => Some("missing_relationship"),
        _ => None,
    }
}

fn ask_loop(_: &mut Shared) -> Verdict {
    let first = discover_set("adversarial")?;
    let again = discover_set("adversarial")?;
    let mut converged = 0;
    let mut saw_180 = false;
    for ((id, category, s), (_, _, s2)) in first.iter().zip(&again) {
        if s.to_json_pretty() != s2.to_json_pretty() {
            return Err(format!("{id}: sessions differ between runs"));
        }
        if s.mode != DiscoveryMode::Active || s.k > K_MAX || s.failure.is_some() {
            return Err(format!("{id}: k = {}, failure {:?}", s.k, s.failure));
        }
        let kind = planted_kind(category).ok_or_else(|| format!("{id}: unknown category {category}"))?;
        let opening = &s.iterations[0];
        let planted: Vec<_> = opening
            .signals
            .iter()
            .filter(|sig| sig.is_critical() && sig.kind.label() == kind)
            .collect();
        if planted.is_empty() {
            return Err(format!("{id}: no critical {kind} raised"));
        }
        for sig in &opening.signals {
            if let SignalKind::DistributionAnomaly { outliers, .. } = &sig.kind {
                saw_180 |= outliers.iter().any(|o| o.value == 180.0);
            }
        }
        for sig in planted {
            let question = opening.questions.iter().position(|q| &q.signal == sig);
            let resolved = question.is_some_and(|i| opening.evidence[i].resolution.is_resolved());
            if !resolved {
                return Err(format!("{id}: {kind} left unresolved"));
            }
        }
        if !s.residual_critical().is_empty() {
            return Err(format!("{id}: critical signals remain after k = {}", s.k));
        }
        if s.terminal_reason == TerminalReason::Converged {
            converged += 1;
            let h = &s.history;
            if h[h.len() - 1].fingerprint != h[h.len() - 2].fingerprint {
                return Err(format!("{id}: converged on an unstable schema"));
            }
        }
    }
    if !saw_180 {
        return Err("the age 180 outlier was never flagged".into());
    }
    // The adversarial sessions end on answered questions, so stability of
    // converged sessions is checked on the e2e set as well.
    for (id, _, s) in discover_set("e2e")? {
        if s.k > K_MAX {
            return Err(format!("{id}: k = {}", s.k));
        }
        if s.terminal_reason == TerminalReason::Converged {
            converged += 1;
            let h = &s.history;
            if h[h.len() - 1].fingerprint != h[h.len() - 2].fingerprint {
                return Err(format!("{id}: converged on an unstable schema"));
            }
        }
    }
    Ok(format!(
        "{} sessions within k <= {K_MAX}, planted signals resolved, {converged} converged sessions stable, replay deterministic",
        first.len()
    ))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

/// File contents with the run timestamp removed from manifests.
fn comparable(path: &Path, bytes: &[u8]) -> Vec<u8> {
    if path.file_name().is_some_and(|n| n == "manifest.json") {
        if let Ok(mut v) = serde_json::from_slice::<serde_json::Value>(bytes) {
            if let Some(o) = v.as_object_mut() {
                o.remove("created_at");
            }
            return v.to_string().into_bytes();
        }
    }
    bytes.to_vec()
}

fn e2e_determinism(shared: &mut Shared) -> Verdict {
    let dir = fixtures_dir("e2e");
    let cfg = set_config("e2e")?;
    let scratch = shared.scratch();
    let start = Instant::now();
    let (report, runs) = replay_eval(&dir, &cfg, &scratch.join("e2e-a"))?;
    let (report_b, _) = replay_eval(&dir, &cfg, &scratch.join("e2e-b"))?;
    let elapsed = start.elapsed();
    shared.e2e = Some(runs);
    if report.overall.total != E2E_FIXTURES {
        return Err(format!("{} fixtures, expected {E2E_FIXTURES}", report.overall.total));
    }
    if report.overall.accuracy != E2E_ACCURACY || report != report_b {
        return Err(format!("accuracy {}\n{}", report.overall.accuracy, report.to_table()));
    }
    let a = files_under(&scratch.join("e2e-a"));
    let b = files_under(&scratch.join("e2e-b"));
    if a.keys().ne(b.keys()) {
        return Err("the two runs wrote different files".into());
    }
    for (path, bytes) in &a {
        if comparable(path, bytes) != comparable(path, &b[path]) {
            return Err(format!("{} differs between runs", path.display()));
        }
    }
    if elapsed >= E2E_BUDGET {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!(
        "accuracy {:.3} on {} fixtures, {} artifacts identical, two runs in {elapsed:.1?}",
        report.overall.accuracy,
        report.overall.total,
        a.len()
    ))
}

fn ablation_order(shared: &mut Shared) -> Verdict {
    let dir = fixtures_dir("adversarial");
    let base = set_config("adversarial")?;
    let scratch = shared.scratch();
    let (full, runs) = replay_eval(&dir, &base, &scratch.join("adv-full"))?;
    shared.adversarial = Some(runs);
    let mut no_clear = base.clone();
    no_clear.ablation.no_clear = true;
    let (no_clear, _) = replay_eval(&dir, &no_clear, &scratch.join("adv-no-clear"))?;
    let mut passive = base.clone();
    passive.discovery.mode = DiscoveryMode::Passive;
    let (passive, _) = replay_eval(&dir, &passive, &scratch.join("adv-passive"))?;
    let line = format!(
        "full {:.3}, no-clear {:.3}, passive {:.3}",
        full.overall.accuracy, no_clear.overall.accuracy, passive.overall.accuracy
    );
    if full.overall.accuracy >= no_clear.overall.accuracy && full.overall.accuracy >= passive.overall.accuracy {
        Ok(line)
    } else {
        Err(line)
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Every result row cites committed tuples whose source text holds the
/// cell's surface form. Computed columns only need the citation.
fn check_provenance(id: &str, run: &RunOutcome) -> Result<usize, String> {
    let result = &run.answer.result;
    let columns = match &run.optimized {
        Some(p) => p.output(&run.schema).map_err(|e| format!("{id}: {e}"))?,
        None => Vec::new(),
    };
    let mut cells = 0;
    for (i, (row, prov)) in result.rows.iter().zip(&result.provenance.rows).enumerate() {
        if prov.is_empty() {
            return Err(format!("{id}: row {i} has no provenance"));
        }
        for e in prov {
            if run.db.tuple(&e.tuple_id).is_none() {
                return Err(format!("{id}: row {i} cites uncommitted {}", e.tuple_id));
            }
            if run.corpus.resolve_span(&e.source).is_none() {
                return Err(format!("{id}: {} does not resolve", e.source));
            }
        }
        for (col, cell) in columns.iter().zip(row) {
            let (Some(table), Some(value)) = (&col.table, cell) else {
                continue;
            };
            let traced = prov.iter().any(|e| {
                let Some(t) = run.db.tuple(&e.tuple_id) else {
                    return false;
                };
                if &t.table != table || t.value(&col.name) != Some(value) {
                    return false;
                }
                let surface = t.raw_values.get(&col.name).cloned().unwrap_or_else(|| value.render());
                let text = run.corpus.resolve_span(&e.source).unwrap_or_default();
                normalize(text).contains(&normalize(&surface))
            });
            if !traced {
                return Err(format!("{id}: row {i} {table}.{} = {} has no source", col.name, value.render()));
            }
            cells += 1;
        }
    }
    Ok(cells)
}

fn provenance(shared: &mut Shared) -> Verdict {
    if shared.e2e.is_none() {
        let scratch = shared.scratch();
        shared.e2e = Some(replay_eval(&fixtures_dir("e2e"), &set_config("e2e")?, &scratch.join("prov-e2e"))?.1);
    }
    if shared.adversarial.is_none() {
        let scratch = shared.scratch();
        shared.adversarial = Some(
            replay_eval(
                &fixtures_dir("adversarial"),
                &set_config("adversarial")?,
                &scratch.join("prov-adv"),
            )?
            .1,
        );
    }
    let mut answered = 0;
    let mut cells = 0;
    for run in shared.e2e.iter().chain(&shared.adversarial).flatten() {
        let Ok(outcome) = &run.outcome else {
            continue;
        };
        answered += 1;
        cells += check_provenance(&run.fixture.id, outcome)?;
    }
    if answered == 0 {
        return Err("no fixture was answered".into());
    }
    Ok(format!("{answered} answered fixtures, {cells} cited cells traced to source text"))
}

type Criterion = (u8, &'static str, fn(&mut Shared) -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "constraint engine equals pairwise reference", constraint_engine),
        (2, "conformal coverage", conformal_coverage),
        (3, "executor equals brute-force evaluator", executor_vs_reference),
        (4, "optimizer sound and idempotent", optimizer_soundness),
        (5, "SQL round trip", sql_round_trip),
        (6, "clarification loop on adversarial fixtures", ask_loop),
        (7, "end-to-end accuracy and determinism", e2e_determinism),
        (8, "ablation ordering", ablation_order),
        (9, "provenance completeness", provenance),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, run) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(p.as_ref()))));
        match verdict {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}
