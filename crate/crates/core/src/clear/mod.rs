//! Extraction and correction of candidate tuples.
//!
//! Tuples are extracted per chunk, staged, gated on calibrated confidence,
//! validated against the constraint set, routed to a correction strategy,
//! and finally committed with unresolved violators quarantined.

pub mod calibration;
pub mod commit;
pub mod correct;
pub mod extract;
pub mod staging;
pub mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{
    fit_calibrator, load_calibration, score_confidence, CalibrationRecord, ConfidenceGate, ConformalCalibrator, Label,
};
pub use commit::{commit, commit_unchecked, CommitReport, RelationalStore};
pub use correct::{route_corrections, CorrectionContext, CorrectionDecision, Outcome, Strategy, Trigger};
pub use extract::{extract_all, extract_tuples, ExtractionOutcome};
pub use staging::StagingStore;
pub use validate::{validate_constraints, validate_tuples};

use crate::model::{TupleStatus, Violation};

/// Upper bound on validate and correct rounds before commit.
pub const MAX_CORRECTION_CYCLES: usize = 2;

#[derive(Debug, Error)]
pub enum ClearError {
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("invalid constraint: {0}")]
    Constraint(String),
    #[error("duplicate tuple id {0}")]
    DuplicateTuple(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub low_confidence: Vec<String>,
    pub violations: Vec<Violation>,
    pub decisions: Vec<CorrectionDecision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearReport {
    pub cycles: Vec<CycleReport>,
    pub commit: CommitReport,
}

/// Scores pending tuples: passing ones become accepted, the rest are
/// returned for correction.
pub fn gate_pending(store: &mut StagingStore, gate: &ConfidenceGate) -> Result<Vec<String>, ClearError> {
    let pending: Vec<(String, bool)> = store
        .tuples()
        .filter(|t| t.status == TupleStatus::Pending)
        .map(|t| (t.tuple_id.clone(), score_confidence(t, gate).1))
        .collect();
    let mut low = Vec::new();
    for (id, pass) in pending {
        if pass {
            store.set_status(&id, TupleStatus::Accepted)?;
        } else {
            low.push(id);
        }
    }
    Ok(low)
}

/// Runs up to `max_cycles` validate and correct rounds and commits.
pub fn run_clear(
    ctx: &CorrectionContext<'_>,
    store: &mut StagingStore,
    gate: &ConfidenceGate,
    max_cycles: usize,
) -> Result<(RelationalStore, ClearReport), ClearError> {
    let mut report = ClearReport::default();
    for _ in 0..max_cycles.max(1) {
        let low_confidence = gate_pending(store, gate)?;
        let violations = validate_constraints(store)?;
        if low_confidence.is_empty() && violations.is_empty() {
            report.cycles.push(CycleReport::default());
            break;
        }
        let decisions = route_corrections(ctx, store, &violations, &low_confidence)?;
        report.cycles.push(CycleReport {
            low_confidence,
            violations,
            decisions,
        });
    }
    gate_pending(store, gate)?;
    let db = commit(store)?;
    report.commit = db.report.clone();
    Ok((db, report))
}
