use std::io::BufRead;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::ClearError;
use crate::model::CandidateTuple;
use crate::stats::{conformal_rank, kth_smallest};

pub const DEFAULT_ALPHA: f64 = 0.1;
/// Raw confidence threshold used when no calibration set is supplied.
pub const FALLBACK_TAU_LOW: f64 = 0.8;
/// Slack on the inclusive `score <= q_hat` comparison.
const PASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Incorrect,
}

/// One labeled extraction: nonconformity score `1 - confidence` and whether
/// the extraction was right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub score: f64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_count: Option<usize>,
}

impl CalibrationRecord {
    pub fn from_confidence(confidence: f64, label: Label) -> Self {
        Self {
            score: 1.0 - confidence,
            label,
            table: None,
            attribute_count: None,
        }
    }
}

pub fn load_calibration(path: &Path) -> Result<Vec<CalibrationRecord>, ClearError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CalibrationRecord = serde_json::from_str(&line)
            .map_err(|e| ClearError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if !record.score.is_finite() || record.score < 0.0 {
            return Err(ClearError::Format(format!(
                "{} line {}: score must be finite and non-negative",
                path.display(),
                i + 1
            )));
        }
        records.push(record);
    }
    Ok(records)
}

/// Split-conformal threshold over nonconformity scores of correct records.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalCalibrator<F: Float> {
    scores: Vec<F>,
    alpha: F,
    q_hat: F,
}

impl<F: Float> ConformalCalibrator<F> {
    pub fn fit(scores: &[F], alpha: F) -> Result<Self, ClearError> {
        if !(alpha > F::zero() && alpha < F::one()) {
            return Err(ClearError::Calibration("alpha must lie in (0, 1)".into()));
        }
        if scores.is_empty() {
            return Err(ClearError::Calibration("no labeled-correct calibration records".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(ClearError::Calibration("calibration scores must be finite".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let k = conformal_rank(sorted.len(), alpha.to_f64().expect("alpha converts"));
        let q_hat = kth_smallest(&sorted, k);
        Ok(Self {
            scores: sorted,
            alpha,
            q_hat,
        })
    }

    pub fn q_hat(&self) -> F {
        self.q_hat
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn scores(&self) -> &[F] {
        &self.scores
    }

    pub fn passes(&self, score: F) -> bool {
        score <= self.q_hat + F::from(PASS_TOLERANCE).expect("tolerance converts")
    }
}

pub fn fit_calibrator(records: &[CalibrationRecord], alpha: f64) -> Result<ConformalCalibrator<f64>, ClearError> {
    let correct: Vec<f64> = records
        .iter()
        .filter(|r| r.label == Label::Correct)
        .map(|r| r.score)
        .collect();
    ConformalCalibrator::fit(&correct, alpha)
}

/// How the low-confidence trigger is decided.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfidenceGate {
    Conformal(ConformalCalibrator<f64>),
    Raw { tau_low: f64 },
}

impl Default for ConfidenceGate {
    fn default() -> Self {
        ConfidenceGate::Raw {
            tau_low: FALLBACK_TAU_LOW,
        }
    }
}

impl ConfidenceGate {
    /// The largest nonconformity score that still passes.
    pub fn threshold(&self) -> f64 {
        match self {
            ConfidenceGate::Conformal(c) => c.q_hat(),
            ConfidenceGate::Raw { tau_low } => 1.0 - tau_low,
        }
    }

    pub fn passes(&self, confidence: f64) -> bool {
        match self {
            ConfidenceGate::Conformal(c) => c.passes(1.0 - confidence),
            ConfidenceGate::Raw { tau_low } => confidence + PASS_TOLERANCE >= *tau_low,
        }
    }
}

/// The tuple's confidence (null counts as 0) and whether it clears the gate.
pub fn score_confidence(tuple: &CandidateTuple, gate: &ConfidenceGate) -> (f64, bool) {
    let conf = tuple.confidence.unwrap_or(0.0).clamp(0.0, 1.0);
    (conf, gate.passes(conf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChunkRef;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Sorts and picks the rank by counting, with no shared helpers.
    fn oracle_q_hat(scores: &[f64], alpha: f64) -> f64 {
        let n = scores.len();
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut k = 0;
        while (k as f64) < (n as f64 + 1.0) * (1.0 - alpha) - 1e-9 {
            k += 1;
        }
        if k > n {
            f64::INFINITY
        } else {
            sorted[k - 1]
        }
    }

    #[test]
    fn fitted_examples() {
        let c = ConformalCalibrator::fit(&[0.3, 0.1, 0.4, 0.2], 0.25).unwrap();
        assert_eq!(c.q_hat(), 0.4);
        assert_eq!(oracle_q_hat(&[0.3, 0.1, 0.4, 0.2], 0.25), 0.4);
        let c = ConformalCalibrator::fit(&[0.05], 0.5).unwrap();
        assert_eq!(c.q_hat(), 0.05);
        let c = ConformalCalibrator::fit(&[0.05], 0.1).unwrap();
        assert_eq!(c.q_hat(), f64::INFINITY);
    }

    #[test]
    fn fit_errors() {
        assert!(ConformalCalibrator::fit(&[0.1], 1.5).is_err());
        assert!(ConformalCalibrator::fit(&[0.1], 0.0).is_err());
        assert!(ConformalCalibrator::<f64>::fit(&[], 0.1).is_err());
        let only_wrong = vec![CalibrationRecord::from_confidence(0.9, Label::Incorrect)];
        assert!(fit_calibrator(&only_wrong, 0.1).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let c = ConformalCalibrator::<f32>::fit(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap();
        assert_eq!(c.q_hat(), 0.4f32);
    }

    fn tuple(conf: Option<f64>) -> CandidateTuple {
        let mut t = CandidateTuple::new("t", "T", ChunkRef::new("d", 0, 0, 1).unwrap());
        t.confidence = conf;
        t
    }

    #[test]
    fn scoring() {
        let gate = ConfidenceGate::Conformal(ConformalCalibrator::fit(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap());
        assert_eq!(score_confidence(&tuple(Some(0.95)), &gate), (0.95, true));
        assert_eq!(score_confidence(&tuple(None), &gate), (0.0, false));
        assert_eq!(score_confidence(&tuple(Some(0.60)), &gate), (0.60, true));
        assert_eq!(score_confidence(&tuple(Some(0.59)), &gate), (0.59, false));
        let raw = ConfidenceGate::default();
        assert!(raw.passes(0.8));
        assert!(!raw.passes(0.79));
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.jsonl");
        std::fs::write(
            &path,
            "{\"score\": 0.1, \"label\": \"correct\", \"table\": \"Company\"}\n\n{\"score\": 0.7, \"label\": \"incorrect\"}\n",
        )
        .unwrap();
        let records = load_calibration(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(fit_calibrator(&records, 0.5).unwrap().q_hat(), 0.1);
        std::fs::write(&path, "{\"score\": -1, \"label\": \"correct\"}\n").unwrap();
        assert!(load_calibration(&path).is_err());
    }

    proptest! {
        #[test]
        fn matches_oracle(
            scores in proptest::collection::vec(0.0f64..1.0, 1..60),
            alpha in 0.01f64..0.99,
        ) {
            let c = ConformalCalibrator::fit(&scores, alpha).unwrap();
            prop_assert_eq!(c.q_hat(), oracle_q_hat(&scores, alpha));
        }

        #[test]
        fn marginal_coverage(seed in any::<u64>(), alpha in prop_oneof![Just(0.05), Just(0.1), Just(0.2)]) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut covered = 0usize;
            let mut total = 0usize;
            for _ in 0..20 {
                let cal: Vec<f64> = (0..200).map(|_| 1.0 - rng.gen::<f64>()).collect();
                let c = ConformalCalibrator::fit(&cal, alpha).unwrap();
                for _ in 0..200 {
                    total += 1;
                    covered += c.passes(1.0 - rng.gen::<f64>()) as usize;
                }
            }
            prop_assert!(covered as f64 / total as f64 >= 1.0 - alpha - 0.05);
        }
    }
}
