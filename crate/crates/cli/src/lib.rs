//! Pipeline orchestration, configuration and the evaluation harness behind
//! the `docstruct` binary.

pub mod config;
pub mod eval;
pub mod pipeline;

pub use config::PipelineConfig;
pub use eval::{eval, EvalReport};
pub use pipeline::{run_pipeline, run_pipeline_with, RunOutcome, StageError};
