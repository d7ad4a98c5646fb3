use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{CandidateTuple, Constraint, ConstraintKind, Schema, Value};
use crate::stats::robust_z_scores;

/// Robust z-score beyond which a value is an outlier.
pub const OUTLIER_Z: f64 = 3.5;
/// Fewest non-null values before outlier scoring applies.
pub const MIN_VALUES_FOR_OUTLIERS: usize = 8;
/// Flagged values in one attribute that make an anomaly critical.
pub const CRITICAL_OUTLIERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Critical,
    Minor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub tuple_id: String,
    pub value: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    AlignmentConflict {
        table: String,
        key: Vec<String>,
        attribute: String,
        values: Vec<String>,
        tuple_ids: Vec<String>,
    },
    DistributionAnomaly {
        table: String,
        attribute: String,
        outliers: Vec<Outlier>,
    },
    MissingRelationship {
        source: String,
        target: String,
    },
}

impl SignalKind {
    pub fn rank(&self) -> u8 {
        match self {
            SignalKind::AlignmentConflict { .. } => 0,
            SignalKind::DistributionAnomaly { .. } => 1,
            SignalKind::MissingRelationship { .. } => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SignalKind::AlignmentConflict { .. } => "alignment_conflict",
            SignalKind::DistributionAnomaly { .. } => "distribution_anomaly",
            SignalKind::MissingRelationship { .. } => "missing_relationship",
        }
    }

    /// Entity and attribute surface forms, used as retrieval hints.
    pub fn surface_terms(&self) -> Vec<String> {
        let split = |s: &str| s.replace('_', " ");
        match self {
            SignalKind::AlignmentConflict {
                table,
                key,
                attribute,
                ..
            } => std::iter::once(split(table))
                .chain(key.iter().cloned())
                .chain(std::iter::once(split(attribute)))
                .collect(),
            SignalKind::DistributionAnomaly {
                table,
                attribute,
                outliers,
            } => std::iter::once(split(table))
                .chain(std::iter::once(split(attribute)))
                .chain(outliers.iter().map(|o| Value::Real(o.value).render().trim_end_matches(".0").to_string()))
                .collect(),
            SignalKind::MissingRelationship { source, target } => vec![split(source), split(target)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySignal {
    #[serde(flatten)]
    pub kind: SignalKind,
    pub severity: Severity,
}

impl UncertaintySignal {
    pub fn is_critical(&self) -> bool {
        self.severity == Severity::Critical
    }

    fn sort_key(&self) -> (u8, String) {
        (
            self.kind.rank(),
            serde_json::to_string(&self.kind).expect("signal serializes"),
        )
    }
}

/// Lowercased alphanumerics with a trailing plural `s` removed.
fn concept_key(name: &str) -> String {
    let mut k: String = name
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    if k.len() > 4 && k.ends_with("ies") {
        k.truncate(k.len() - 3);
        k.push('y');
    } else if k.len() > 3 && k.ends_with('s') && !k.ends_with("ss") {
        k.pop();
    }
    k
}

/// The schema table a free-text concept names, if any.
pub fn resolve_concept<'a>(schema: &'a Schema, concept: &str) -> Option<&'a str> {
    let key = concept_key(concept);
    schema
        .tables
        .iter()
        .find(|t| concept_key(&t.name) == key)
        .map(|t| t.name.as_str())
}

/// Finds alignment conflicts, value anomalies and unreachable query
/// concepts. Pure in its inputs; output sorted by kind then payload.
pub fn detect_signals(
    schema: &Schema,
    tuples: &[CandidateTuple],
    constraints: &[Constraint],
    query_concepts: &[String],
) -> Vec<UncertaintySignal> {
    let mut signals = Vec::new();
    for table in &schema.tables {
        let rows: Vec<&CandidateTuple> = tuples.iter().filter(|t| t.table == table.name).collect();
        signals.extend(alignment_conflicts(table, &rows));
        for attr in table.attributes.iter().filter(|a| a.datatype.is_numeric()) {
            if let Some(s) = anomalies(&table.name, &attr.name, &rows, constraints) {
                signals.push(s);
            }
        }
    }
    signals.extend(missing_relationships(schema, query_concepts));
    signals.sort_by_key(UncertaintySignal::sort_key);
    signals
}

fn alignment_conflicts(table: &crate::model::TableDef, rows: &[&CandidateTuple]) -> Vec<UncertaintySignal> {
    let key_attrs = table.key_attributes();
    if key_attrs.is_empty() {
        return Vec::new();
    }
    let mut groups: BTreeMap<Vec<&Value>, Vec<&CandidateTuple>> = BTreeMap::new();
    for t in rows {
        if let Some(key) = key_attrs.iter().map(|a| t.value(a)).collect::<Option<Vec<_>>>() {
            groups.entry(key).or_default().push(t);
        }
    }
    let mut out = Vec::new();
    for (key, group) in &groups {
        for attr in table.attributes.iter().filter(|a| !key_attrs.contains(&a.name)) {
            let with_value: Vec<&&CandidateTuple> = group.iter().filter(|t| t.value(&attr.name).is_some()).collect();
            let distinct: BTreeSet<&Value> = with_value.iter().filter_map(|t| t.value(&attr.name)).collect();
            if distinct.len() < 2 {
                continue;
            }
            out.push(UncertaintySignal {
                kind: SignalKind::AlignmentConflict {
                    table: table.name.clone(),
                    key: key.iter().map(|v| v.render()).collect(),
                    attribute: attr.name.clone(),
                    values: distinct.iter().map(|v| v.render()).collect(),
                    tuple_ids: with_value.iter().map(|t| t.tuple_id.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
                },
                severity: Severity::Critical,
            });
        }
    }
    out
}

fn anomalies(
    table: &str,
    attribute: &str,
    rows: &[&CandidateTuple],
    constraints: &[Constraint],
) -> Option<UncertaintySignal> {
    let values: Vec<(&str, f64)> = rows
        .iter()
        .filter_map(|t| Some((t.tuple_id.as_str(), t.value(attribute)?.as_f64()?)))
        .collect();
    let mut flagged: BTreeMap<&str, Outlier> = BTreeMap::new();
    if values.len() >= MIN_VALUES_FOR_OUTLIERS {
        let xs: Vec<f64> = values.iter().map(|(_, x)| *x).collect();
        if let Some(z) = robust_z_scores(&xs) {
            for ((id, x), z) in values.iter().zip(z) {
                if z.abs() > OUTLIER_Z {
                    flagged.insert(
                        id,
                        Outlier {
                            tuple_id: id.to_string(),
                            value: *x,
                            reason: format!("robust z {z:.2}"),
                        },
                    );
                }
            }
        }
    }
    for c in constraints {
        if let ConstraintKind::NumericRange {
            table: t,
            attribute: a,
            min,
            max,
        } = &c.kind
        {
            if t != table || a != attribute {
                continue;
            }
            for (id, x) in &values {
                if !(*min..=*max).contains(x) {
                    flagged.entry(id).or_insert_with(|| Outlier {
                        tuple_id: id.to_string(),
                        value: *x,
                        reason: format!("outside [{min}, {max}] of {}", c.constraint_id),
                    });
                }
            }
        }
    }
    if flagged.is_empty() {
        return None;
    }
    let severity = if flagged.len() >= CRITICAL_OUTLIERS {
        Severity::Critical
    } else {
        Severity::Minor
    };
    Some(UncertaintySignal {
        kind: SignalKind::DistributionAnomaly {
            table: table.to_string(),
            attribute: attribute.to_string(),
            outliers: flagged.into_values().collect(),
        },
        severity,
    })
}

fn missing_relationships(schema: &Schema, concepts: &[String]) -> Vec<UncertaintySignal> {
    let Some(first_table) = schema.tables.first() else {
        return Vec::new();
    };
    let anchor = concepts
        .iter()
        .find_map(|c| resolve_concept(schema, c))
        .unwrap_or(&first_table.name)
        .to_string();
    let reachable = schema.reachable_from(&anchor);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in concepts {
        let target = match resolve_concept(schema, c) {
            Some(t) if reachable.contains(t) => continue,
            Some(t) => t.to_string(),
            None => c.clone(),
        };
        if seen.insert(target.clone()) {
            out.push(UncertaintySignal {
                kind: SignalKind::MissingRelationship {
                    source: anchor.clone(),
                    target,
                },
                severity: Severity::Critical,
            });
        }
    }
    out
}
