//! Random staging stores covering all four constraint kinds, and a naive
//! pairwise checker to compare against.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use docstruct_core::clear::StagingStore;
use docstruct_core::model::{
    AttrRef, AttributeDef, CandidateTuple, ChunkRef, Constraint, ConstraintKind, DataType, Schema, TableDef, Value,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn schema() -> Schema {
    Schema::new(
        vec![
            TableDef::new(
                "Person",
                vec![
                    AttributeDef::new("person_id", DataType::Identifier),
                    AttributeDef::new("dob", DataType::Date),
                    AttributeDef::new("age", DataType::Integer),
                    AttributeDef::new("admitted", DataType::Date),
                    AttributeDef::new("discharged", DataType::Date),
                ],
            ),
            TableDef::new("Company", vec![AttributeDef::new("ticker", DataType::Identifier)]),
            TableDef::new(
                "Price",
                vec![
                    AttributeDef::new("ticker", DataType::Identifier),
                    AttributeDef::new("price", DataType::Real),
                ],
            ),
        ],
        vec![],
    )
}

/// A random constraint set; every kind appears at least once.
pub fn constraints<R: Rng>(rng: &mut R) -> Vec<Constraint> {
    let mut out = vec![
        Constraint::new(
            "fd_dob",
            ConstraintKind::FunctionalDependency {
                table: "Person".into(),
                determinant: vec!["person_id".into()],
                dependent: "dob".into(),
            },
        ),
        Constraint::new(
            "stay",
            ConstraintKind::Temporal {
                table: "Person".into(),
                earlier: "admitted".into(),
                later: "discharged".into(),
                strict: rng.gen_bool(0.5),
            },
        ),
        Constraint::new(
            "age_range",
            ConstraintKind::NumericRange {
                table: "Person".into(),
                attribute: "age".into(),
                min: 0.0,
                max: *[120.0, 130.0].choose(rng).unwrap(),
            },
        ),
        Constraint::new(
            "price_company",
            ConstraintKind::ForeignKey {
                child: AttrRef::new("Price", "ticker"),
                parent: AttrRef::new("Company", "ticker"),
            },
        ),
    ];
    if rng.gen_bool(0.5) {
        out.push(Constraint::new(
            "fd_age",
            ConstraintKind::FunctionalDependency {
                table: "Person".into(),
                determinant: vec!["person_id".into(), "dob".into()],
                dependent: "age".into(),
            },
        ));
    }
    if rng.gen_bool(0.3) {
        out.push(Constraint::new(
            "price_range",
            ConstraintKind::NumericRange {
                table: "Price".into(),
                attribute: "price".into(),
                min: 0.0,
                max: 100.0,
            },
        ));
    }
    out
}

fn maybe<R: Rng>(rng: &mut R, v: Value) -> Option<Value> {
    (!rng.gen_bool(0.15)).then_some(v)
}

fn date<R: Rng>(rng: &mut R) -> Value {
    let base = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    Value::Date(base + chrono::Days::new(rng.gen_range(0..6)))
}

fn ticker<R: Rng>(rng: &mut R) -> Value {
    Value::Identifier(["a", "b", "c", "d", "e"].choose(rng).unwrap().to_string())
}

/// A store of at most `max_tuples` tuples over [`schema`].
pub fn staging_store<R: Rng>(rng: &mut R, max_tuples: usize) -> StagingStore {
    let mut store = StagingStore::new(schema(), constraints(rng)).expect("constraints fit the schema");
    let n = rng.gen_range(0..=max_tuples);
    let src = ChunkRef::new("doc", 0, 0, 1).unwrap();
    for i in 0..n {
        let t = match rng.gen_range(0..10) {
            0..=5 => {
                let pid = Value::Identifier(format!("p{}", rng.gen_range(0..8)));
                let dob = date(rng);
                let age = Value::Integer(rng.gen_range(-3..140));
                let adm = date(rng);
                let dis = date(rng);
                CandidateTuple::new(format!("t{i:03}"), "Person", src.clone())
                    .with("person_id", maybe(rng, pid))
                    .with("dob", maybe(rng, dob))
                    .with("age", maybe(rng, age))
                    .with("admitted", maybe(rng, adm))
                    .with("discharged", maybe(rng, dis))
            }
            6 | 7 => {
                let tk = ticker(rng);
                CandidateTuple::new(format!("t{i:03}"), "Company", src.clone()).with("ticker", maybe(rng, tk))
            }
            _ => {
                let tk = ticker(rng);
                let price = Value::Real(rng.gen_range(-4..210) as f64 / 2.0);
                CandidateTuple::new(format!("t{i:03}"), "Price", src.clone())
                    .with("ticker", maybe(rng, tk))
                    .with("price", maybe(rng, price))
            }
        };
        store.insert(t).expect("fresh tuple id");
    }
    store
}

/// A violation reduced to what the reference decides: the rule and the
/// tuples it implicates.
pub type Finding = (String, BTreeSet<String>);

/// Every violation, found by comparing tuples pairwise or one at a time.
pub fn reference_violations(store: &StagingStore) -> BTreeSet<Finding> {
    let tuples: Vec<&CandidateTuple> = store.live_tuples().collect();
    let in_table = |t: &str| tuples.iter().copied().filter(move |x| x.table == t).collect::<Vec<_>>();
    let mut out = BTreeSet::new();
    for c in store.constraints() {
        let id = c.constraint_id.clone();
        match &c.kind {
            ConstraintKind::FunctionalDependency {
                table,
                determinant,
                dependent,
            } => {
                let rows = in_table(table);
                let key = |t: &CandidateTuple| -> Option<Vec<Value>> {
                    determinant.iter().map(|a| t.value(a).cloned()).collect()
                };
                for a in &rows {
                    let (Some(ka), Some(da)) = (key(a), a.value(dependent)) else {
                        continue;
                    };
                    let conflict = rows.iter().any(|b| key(b).as_ref() == Some(&ka) && b.value(dependent).is_some_and(|db| db != da));
                    if conflict {
                        let group = rows
                            .iter()
                            .filter(|b| key(b).as_ref() == Some(&ka) && b.value(dependent).is_some())
                            .map(|b| b.tuple_id.clone())
                            .collect();
                        out.insert((id.clone(), group));
                    }
                }
            }
            ConstraintKind::Temporal {
                table,
                earlier,
                later,
                strict,
            } => {
                for t in in_table(table) {
                    if let (Some(Value::Date(a)), Some(Value::Date(b))) = (t.value(earlier), t.value(later)) {
                        if a > b || (*strict && a == b) {
                            out.insert((id.clone(), BTreeSet::from([t.tuple_id.clone()])));
                        }
                    }
                }
            }
            ConstraintKind::NumericRange {
                table,
                attribute,
                min,
                max,
            } => {
                for t in in_table(table) {
                    let x = match t.value(attribute) {
                        Some(Value::Integer(i)) => *i as f64,
                        Some(Value::Real(r)) => *r,
                        _ => continue,
                    };
                    if x < *min || x > *max {
                        out.insert((id.clone(), BTreeSet::from([t.tuple_id.clone()])));
                    }
                }
            }
            ConstraintKind::ForeignKey { child, parent } => {
                let parents = in_table(&parent.table);
                for t in in_table(&child.table) {
                    let Some(v) = t.value(&child.attribute) else {
                        continue;
                    };
                    if !parents.iter().any(|p| p.value(&parent.attribute) == Some(v)) {
                        out.insert((id.clone(), BTreeSet::from([t.tuple_id.clone()])));
                    }
                }
            }
        }
    }
    out
}
