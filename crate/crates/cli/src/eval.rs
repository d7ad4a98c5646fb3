//! Fixture-based evaluation: one pipeline run per question, exact-match
//! scoring against gold answers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use docstruct_core::gateway::Provider;
use docstruct_core::model::Query;

use crate::config::PipelineConfig;
use crate::pipeline::{build_provider, run_pipeline_with, RunOutcome, StageError};

pub const FIXTURES_FILE: &str = "fixtures.jsonl";
pub const CONFIG_FILE: &str = "pipeline.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFixture {
    pub id: String,
    #[serde(default = "default_category")]
    pub category: String,
    pub question: String,
    pub gold: Json,
    /// Replay file, relative to the fixture directory.
    pub replay: PathBuf,
}

fn default_category() -> String {
    "general".into()
}

pub fn load_fixtures(dir: &Path) -> Result<Vec<EvalFixture>, String> {
    let path = dir.join(FIXTURES_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err("no fixtures".into()),
        Err(e) => return Err(format!("{}: {e}", path.display())),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: EvalFixture =
            serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        out.push(f);
    }
    if out.is_empty() {
        return Err("no fixtures".into());
    }
    Ok(out)
}

/// The pipeline config for a fixture directory: its `pipeline.toml` when
/// present, defaults otherwise.
pub fn fixture_config(dir: &Path) -> Result<PipelineConfig, String> {
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        PipelineConfig::load(&path).map_err(|e| e.to_string())
    } else {
        Ok(PipelineConfig::default())
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn gold_item(j: &Json) -> String {
    match j {
        Json::String(s) => normalize(s),
        other => normalize(&other.to_string()),
    }
}

/// Numbers compare exactly after parsing; strings after whitespace and case
/// normalization; a list of golds against the comma or line separated
/// answer items, in any order.
pub fn answer_matches(answer: &str, gold: &Json) -> bool {
    match gold {
        Json::Number(n) => match (answer.trim().parse::<f64>(), n.as_f64()) {
            (Ok(a), Some(g)) => a == g,
            _ => false,
        },
        Json::String(s) => normalize(answer) == normalize(s),
        Json::Array(items) => {
            let mut got: Vec<String> = answer
                .split([',', '\n'])
                .map(normalize)
                .filter(|s| !s.is_empty())
                .collect();
            let mut want: Vec<String> = items.iter().map(gold_item).collect();
            got.sort();
            want.sort();
            got == want
        }
        other => normalize(answer) == gold_item(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Correct,
    Wrong,
    Errored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResult {
    pub id: String,
    pub category: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub gold: Json,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Score {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        }
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Score,
    pub categories: BTreeMap<String, Score>,
    pub fixtures: Vec<FixtureResult>,
}

impl EvalReport {
    pub fn from_results(fixtures: Vec<FixtureResult>) -> Self {
        let mut report = EvalReport::default();
        for f in &fixtures {
            let ok = f.status == Status::Correct;
            report.overall.add(ok);
            report.categories.entry(f.category.clone()).or_default().add(ok);
        }
        report.fixtures = fixtures;
        report
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self.categories.keys().map(String::len).max().unwrap_or(0).max("overall".len());
        writeln!(s, "{:<width$}  {:>7}  {:>5}  {:>8}", "category", "correct", "total", "accuracy").unwrap();
        let mut line = |name: &str, sc: &Score| {
            writeln!(s, "{:<width$}  {:>7}  {:>5}  {:>8.3}", name, sc.correct, sc.total, sc.accuracy).unwrap();
        };
        for (name, sc) in &self.categories {
            line(name, sc);
        }
        line("overall", &self.overall);
        for f in self.fixtures.iter().filter(|f| f.status != Status::Correct) {
            let detail = f
                .error
                .clone()
                .or_else(|| f.answer.clone().map(|a| format!("answered {a:?}, gold {}", f.gold)))
                .unwrap_or_default();
            writeln!(s, "{:?} {}: {}", f.status, f.id, detail).unwrap();
        }
        s
    }
}

/// A finished fixture run, for callers that want more than the score.
pub struct FixtureRun {
    pub fixture: EvalFixture,
    pub outcome: Result<RunOutcome, StageError>,
}

fn score(f: &EvalFixture, outcome: &Result<RunOutcome, StageError>) -> FixtureResult {
    let mut r = FixtureResult {
        id: f.id.clone(),
        category: f.category.clone(),
        status: Status::Errored,
        answer: None,
        gold: f.gold.clone(),
        error: None,
    };
    match outcome {
        Err(e) => r.error = Some(e.to_string()),
        Ok(run) => {
            r.answer = Some(run.answer.text.clone());
            if run.provider_errors > 0 {
                r.error = Some(format!("{} provider calls failed", run.provider_errors));
            } else if answer_matches(&run.answer.text, &f.gold) {
                r.status = Status::Correct;
            } else {
                r.status = Status::Wrong;
            }
        }
    }
    r
}

/// Runs every fixture in `dir` with providers from `provider_for`, writing
/// each run under `out_root/<id>`.
pub fn eval_with(
    dir: &Path,
    base: &PipelineConfig,
    out_root: &Path,
    provider_for: impl Fn(&EvalFixture, &PipelineConfig) -> Result<Arc<dyn Provider>, StageError>,
) -> Result<(EvalReport, Vec<FixtureRun>), String> {
    let fixtures = load_fixtures(dir)?;
    let mut runs = Vec::new();
    let mut results = Vec::new();
    for f in fixtures {
        let mut cfg = base.clone();
        cfg.providers.replay = Some(dir.join(&f.replay));
        cfg.out_dir = out_root.join(&f.id);
        let outcome = Query::new(f.id.clone(), f.question.clone())
            .map_err(|e| StageError {
                stage: "config",
                cause: e.to_string(),
            })
            .and_then(|q| {
                let provider = provider_for(&f, &cfg)?;
                run_pipeline_with(&cfg, &q, provider)
            });
        results.push(score(&f, &outcome));
        runs.push(FixtureRun { fixture: f, outcome });
    }
    Ok((EvalReport::from_results(results), runs))
}

/// Replays every fixture in `dir` and scores it.
pub fn eval(dir: &Path, base: &PipelineConfig, out_root: &Path) -> Result<EvalReport, String> {
    let (report, _) = eval_with(dir, base, out_root, |_, cfg| {
        cfg.validate().map_err(|e| StageError {
            stage: "config",
            cause: e.to_string(),
        })?;
        build_provider(cfg)
    })?;
    fs::create_dir_all(out_root).map_err(|e| e.to_string())?;
    fs::write(out_root.join("eval.json"), report.to_json_pretty()).map_err(|e| e.to_string())?;
    fs::write(out_root.join("eval.txt"), report.to_table()).map_err(|e| e.to_string())?;
    Ok(report)
}
