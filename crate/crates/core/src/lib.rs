//! Query-driven structuring of document corpora: schema discovery, validated
//! extraction into a provenance-tracked relational store, and relational
//! answering with evidence traceback.

pub mod clear;
pub mod corpus;
pub mod discovery;
pub mod gateway;
pub mod model;
pub mod relational;
pub mod stats;

pub use clear::RelationalStore;
pub use corpus::Corpus;
pub use discovery::{run_discovery, DiscoveryConfig, DiscoverySession};
pub use gateway::Gateway;
pub use model::{CandidateTuple, Constraint, Query, Schema};
pub use relational::{Answer, Plan, ResultSet};

/// Split-conformal calibrator over `f64` scores.
pub type Calibrator = clear::ConformalCalibrator<f64>;
