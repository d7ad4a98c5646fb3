//! Writes `fixtures/e2e` and `fixtures/adversarial`: corpus, constraints,
//! questions and a replay file recorded from the scripted oracle, then
//! replays each set to check it scores as recorded.
//!
//! Usage: `author-fixtures [OUT_ROOT]` (default `fixtures`).

mod oracle;
mod world;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use docstruct_cli::config::PipelineConfig;
use docstruct_cli::eval::{eval, eval_with, fixture_config, CONFIG_FILE, FIXTURES_FILE};
use docstruct_core::clear::extract::lexically_overlaps;
use docstruct_core::corpus::DEFAULT_CHUNK_SIZE;
use docstruct_core::discovery::DiscoveryMode;
use docstruct_core::gateway::{Provider, RecordingProvider};

use world::{Mode, World};

const REPLAY_FILE: &str = "replay.jsonl";

const PIPELINE_TOML: &str = r#"corpus = "corpus.jsonl"
constraints = "constraints.json"

[providers]
replay = "replay.jsonl"
"#;

fn check_world(world: &World) -> Result<()> {
    for doc in &world.docs {
        ensure!(doc.text.chars().count() <= DEFAULT_CHUNK_SIZE, "{} does not fit one chunk", doc.id);
        for r in &doc.rows {
            ensure!(r.values["name"].is_string(), "{}: row without a name", doc.id);
        }
    }
    for q in &world.questions {
        for table in &q.schema.tables {
            for doc in world.docs.iter().filter(|d| !oracle::rows_for(d, table).is_empty()) {
                ensure!(
                    lexically_overlaps(doc.text, table),
                    "{}: {} states {} rows but never mentions the table",
                    q.id,
                    doc.id,
                    table.name
                );
            }
        }
    }
    Ok(())
}

fn write_inputs(world: &World, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let corpus: Vec<String> = world
        .docs
        .iter()
        .map(|d| json!({"doc_id": d.id, "title": d.title, "text": d.text}).to_string())
        .collect();
    fs::write(dir.join("corpus.jsonl"), corpus.join("\n") + "\n")?;
    fs::write(
        dir.join("constraints.json"),
        serde_json::to_string_pretty(&world.constraints)? + "\n",
    )?;
    let fixtures: Vec<String> = world
        .questions
        .iter()
        .map(|q| {
            json!({"id": q.id, "category": q.category, "question": q.text, "gold": q.gold, "replay": REPLAY_FILE})
                .to_string()
        })
        .collect();
    fs::write(dir.join(FIXTURES_FILE), fixtures.join("\n") + "\n")?;
    fs::write(dir.join(CONFIG_FILE), PIPELINE_TOML)?;
    let replay = dir.join(REPLAY_FILE);
    if replay.exists() {
        fs::remove_file(replay)?;
    }
    Ok(())
}

fn mode_config(base: &PipelineConfig, mode: &Mode) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.ablation.no_clear = mode.no_clear;
    if mode.passive {
        cfg.discovery.mode = DiscoveryMode::Passive;
    }
    cfg
}

fn author(world: World, dir: &Path) -> Result<()> {
    check_world(&world)?;
    write_inputs(&world, dir)?;
    let base = fixture_config(dir).map_err(anyhow::Error::msg)?;
    let world = Arc::new(world);
    let scratch = tempfile::tempdir()?;
    for mode in &world.modes {
        let recorder = Arc::new(RecordingProvider::new(Arc::new(oracle::provider(world.clone()))));
        let cfg = mode_config(&base, mode);
        let provider: Arc<dyn Provider> = recorder.clone();
        let (report, _) = eval_with(dir, &cfg, &scratch.path().join(mode.name), |_, _| Ok(provider.clone()))
            .map_err(anyhow::Error::msg)?;
        println!("{} [{}] recorded", world.name, mode.name);
        print!("{}", report.to_table());
        ensure!(
            report.overall.correct == mode.expected_correct,
            "{} [{}]: {} correct, expected {}",
            world.name,
            mode.name,
            report.overall.correct,
            mode.expected_correct
        );
        recorder.write_jsonl(&dir.join(REPLAY_FILE))?;
    }
    for mode in &world.modes {
        let cfg = mode_config(&base, mode);
        let report = eval(dir, &cfg, &scratch.path().join(format!("replay-{}", mode.name))).map_err(anyhow::Error::msg)?;
        if report.overall.correct != mode.expected_correct {
            print!("{}", report.to_table());
            bail!("{} [{}] scores differently on replay", world.name, mode.name);
        }
        println!("{} [{}] replays {}/{}", world.name, mode.name, report.overall.correct, report.overall.total);
    }
    Ok(())
}

fn main() -> Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures"));
    author(world::e2e(), &root.join("e2e")).context("e2e")?;
    author(world::adversarial(), &root.join("adversarial")).context("adversarial")?;
    Ok(())
}
