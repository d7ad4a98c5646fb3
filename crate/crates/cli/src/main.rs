use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use docstruct_cli::config::PipelineConfig;
use docstruct_cli::eval::{eval, fixture_config};
use docstruct_cli::pipeline::{self as p, StageError};
use docstruct_core::corpus::SampleMode;
use docstruct_core::discovery::DiscoveryMode;
use docstruct_core::model::Query;

fn parse_serde<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct Overrides {
    /// TOML config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    constraints: Option<PathBuf>,
    #[arg(long, global = true)]
    schema_file: Option<PathBuf>,
    /// Replay fixture file to serve model replies from.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    #[arg(long, global = true)]
    chunk_overlap: Option<usize>,
    /// active or passive
    #[arg(long, global = true, value_parser = parse_serde::<DiscoveryMode>)]
    discovery_mode: Option<DiscoveryMode>,
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    #[arg(long, global = true)]
    probe_breadth: Option<usize>,
    #[arg(long, global = true)]
    chunks_per_question: Option<usize>,
    #[arg(long, global = true)]
    sample_size: Option<usize>,
    /// biased or uniform
    #[arg(long, global = true, value_parser = parse_serde::<SampleMode>)]
    sample_mode: Option<SampleMode>,
    #[arg(long, global = true)]
    no_clear: bool,
    #[arg(long, global = true)]
    no_schema_discovery: bool,
    #[arg(long, global = true)]
    no_structured_reasoning: bool,
    #[arg(long, global = true)]
    no_llm_synthesis: bool,
    #[arg(long, global = true)]
    enforce_proposed: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.corpus, self.corpus.clone().map(Some));
        set!(cfg.out_dir, self.out_dir);
        set!(cfg.calibration, self.calibration.clone().map(Some));
        set!(cfg.alpha, self.alpha);
        set!(cfg.constraints, self.constraints.clone().map(Some));
        set!(cfg.schema_file, self.schema_file.clone().map(Some));
        set!(cfg.providers.replay, self.replay.clone().map(Some));
        set!(cfg.chunking.size, self.chunk_size);
        set!(cfg.chunking.overlap, self.chunk_overlap);
        set!(cfg.discovery.mode, self.discovery_mode);
        set!(cfg.discovery.max_iterations, self.max_iterations);
        set!(cfg.discovery.probe_breadth, self.probe_breadth);
        set!(cfg.discovery.chunks_per_question, self.chunks_per_question);
        set!(cfg.discovery.sample_size, self.sample_size);
        set!(cfg.discovery.sample_mode, self.sample_mode);
        let a = &mut cfg.ablation;
        a.no_clear |= self.no_clear;
        a.no_schema_discovery |= self.no_schema_discovery;
        a.no_structured_reasoning |= self.no_structured_reasoning;
        a.no_llm_synthesis |= self.no_llm_synthesis;
        a.enforce_proposed |= self.enforce_proposed;
    }

    fn load(&self, fallback: Option<&Path>) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => PipelineConfig::load(path)?,
            (None, Some(dir)) => fixture_config(dir).map_err(anyhow::Error::msg)?,
            (None, None) => PipelineConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.check().context("config")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Chunk and index the corpus.
    Ingest,
    /// Discover a schema for a question.
    Discover {
        #[arg(long)]
        query: String,
    },
    /// Extract candidate tuples with the discovered schema.
    Extract,
    /// Check staged tuples against the constraints.
    Validate,
    /// Correct staged tuples and commit them to the database.
    Commit,
    /// Run SQL against the committed database.
    Query {
        #[arg(long)]
        sql: String,
    },
    /// Answer a question over the committed database.
    Answer {
        #[arg(long)]
        query: String,
    },
    /// Every stage, end to end.
    Run {
        #[arg(long)]
        query: String,
    },
    /// Run and score every fixture in a directory.
    Eval { dir: PathBuf },
}

#[derive(Parser)]
#[command(name = "docstruct", version, about = "Answer questions over a document corpus through a query-specific relational store")]
struct Top {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

fn query_for(text: &str) -> Result<Query, StageError> {
    Query::from_text(text).map_err(|e| StageError {
        stage: "config",
        cause: e.to_string(),
    })
}

fn gateway(cfg: &PipelineConfig) -> Result<docstruct_core::Gateway, StageError> {
    Ok(p::build_gateway(cfg, p::build_provider(cfg)?))
}

fn staged(cfg: &PipelineConfig, warnings: &mut Vec<String>) -> Result<docstruct_core::clear::StagingStore, StageError> {
    let schema = p::load_schema(cfg)?;
    let tuples = p::read_tuples(&cfg.out_dir.join(p::STAGING_FILE), &schema)?;
    let user = p::load_user_constraints(cfg)?;
    let proposed = match std::fs::read_to_string(cfg.out_dir.join(p::SESSION_FILE)) {
        Ok(text) => serde_json::from_str::<docstruct_core::DiscoverySession>(&text)
            .map(|s| s.proposed_constraints)
            .unwrap_or_default(),
        Err(_) => Vec::new(),
    };
    let constraints = p::enforced_constraints(&schema, &user, &proposed, cfg.ablation.enforce_proposed, warnings);
    p::stage(&schema, constraints, tuples)
}

fn run(top: Top) -> Result<()> {
    let fallback = match &top.command {
        Command::Eval { dir } => Some(dir.as_path()),
        _ => None,
    };
    let mut cfg = top.overrides.load(fallback)?;
    let mut warnings = Vec::new();
    match top.command {
        Command::Ingest => {
            let corpus = p::ingest(&cfg)?;
            let c = corpus.counts();
            println!("{} documents, {} chunks", c.docs, c.chunks);
        }
        Command::Discover { query } => {
            let q = query_for(&query)?;
            let gw = gateway(&cfg)?;
            let corpus = p::load_corpus(&cfg)?;
            let user = p::load_user_constraints(&cfg)?;
            let d = p::discover(&cfg, &gw, &corpus, &q, &user, &mut warnings)?;
            println!("{}", d.schema.to_json_pretty());
            if let Some(s) = &d.session {
                println!("terminal reason: {:?} after {} iterations", s.terminal_reason, s.k);
            }
        }
        Command::Extract => {
            let gw = gateway(&cfg)?;
            let corpus = p::load_corpus(&cfg)?;
            let schema = p::load_schema(&cfg)?;
            let tuples = p::extract(&cfg, &gw, &corpus, &schema)?;
            println!("{} candidate tuples", tuples.len());
        }
        Command::Validate => {
            let store = staged(&cfg, &mut warnings)?;
            let violations = p::validate(&cfg, &store)?;
            for v in &violations {
                println!("{}: {}", v.constraint_id, v.detail);
            }
            println!("{} violations", violations.len());
        }
        Command::Commit => {
            let gw = gateway(&cfg)?;
            let corpus = p::load_corpus(&cfg)?;
            let store = staged(&cfg, &mut warnings)?;
            let db = p::clear_and_commit(&cfg, &gw, &corpus, store)?;
            let r = &db.report;
            println!("{} committed, {} quarantined, {} rejected", r.committed, r.quarantined, r.rejected);
        }
        Command::Query { sql } => {
            let db = p::load_db(&cfg)?;
            let (_, result) = p::run_sql(&db, &sql)?;
            print!("{}", result.to_csv());
        }
        Command::Answer { query } => {
            let q = query_for(&query)?;
            let gw = gateway(&cfg)?;
            let corpus = p::load_corpus(&cfg)?;
            let db = p::load_db(&cfg)?;
            let a = p::answer(&cfg, &gw, &corpus, &db, &q)?;
            println!("{}", a.answer.text);
            for line in p::citation_lines(&a.answer) {
                println!("  {line}");
            }
            p::write_manifest(&cfg, Some(&q), &warnings)?;
        }
        Command::Run { query } => {
            let q = query_for(&query)?;
            let out = p::run_pipeline(&cfg, &q)?;
            warnings = out.warnings.clone();
            println!("{}", out.answer.text);
            for line in p::citation_lines(&out.answer) {
                println!("  {line}");
            }
        }
        Command::Eval { dir } => {
            if top.overrides.out_dir.is_none() {
                cfg.out_dir = PathBuf::from("eval-out");
            }
            let report = eval(&dir, &cfg, &cfg.out_dir).map_err(anyhow::Error::msg)?;
            println!("{}", report.to_json_pretty());
            print!("{}", report.to_table());
        }
    }
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let top = Top::parse();
    match run(top) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
