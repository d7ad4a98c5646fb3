use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::staging::StagingStore;
use super::ClearError;
use crate::model::{CandidateTuple, Constraint, ConstraintKind, Schema, Value, Violation};

/// Checks every constraint against the live tuples of the store.
pub fn validate_constraints(store: &StagingStore) -> Result<Vec<Violation>, ClearError> {
    let live: Vec<&CandidateTuple> = store.live_tuples().collect();
    validate_tuples(store.schema(), store.constraints(), &live)
}

/// Checks `constraints` against an arbitrary tuple set. Null values never
/// violate anything. Output is sorted by constraint id, then smallest
/// offending tuple id.
pub fn validate_tuples(
    schema: &Schema,
    constraints: &[Constraint],
    tuples: &[&CandidateTuple],
) -> Result<Vec<Violation>, ClearError> {
    let mut by_table: BTreeMap<&str, Vec<&CandidateTuple>> = BTreeMap::new();
    for t in tuples {
        by_table.entry(t.table.as_str()).or_default().push(t);
    }
    let rows = |table: &str| by_table.get(table).cloned().unwrap_or_default();
    let mut out = Vec::new();
    for c in constraints {
        let problems = c.check(schema);
        if !problems.is_empty() {
            return Err(ClearError::Constraint(problems.join("; ")));
        }
        let id = &c.constraint_id;
        match &c.kind {
            ConstraintKind::FunctionalDependency {
                table,
                determinant,
                dependent,
            } => out.extend(functional_dependency(id, &rows(table), determinant, dependent)),
            ConstraintKind::Temporal {
                earlier, later, strict, table,
            } => {
                for t in rows(table) {
                    let (Some(a), Some(b)) = (t.value(earlier), t.value(later)) else {
                        continue;
                    };
                    let bad = match a.compare(b) {
                        Some(Ordering::Greater) => true,
                        Some(Ordering::Equal) => *strict,
                        _ => false,
                    };
                    if bad {
                        out.push(single(id, t, format!("{earlier} {a} is not before {later} {b}")));
                    }
                }
            }
            ConstraintKind::NumericRange {
                table,
                attribute,
                min,
                max,
            } => {
                for t in rows(table) {
                    let Some(x) = t.value(attribute).and_then(Value::as_f64) else {
                        continue;
                    };
                    if !(*min..=*max).contains(&x) {
                        out.push(single(id, t, format!("{attribute} {x} outside [{min}, {max}]")));
                    }
                }
            }
            ConstraintKind::ForeignKey { child, parent } => {
                let parents: Vec<&Value> = rows(&parent.table)
                    .into_iter()
                    .filter_map(|p| p.value(&parent.attribute))
                    .collect();
                let exact: BTreeSet<&Value> = parents.iter().copied().collect();
                for t in rows(&child.table) {
                    let Some(v) = t.value(&child.attribute) else {
                        continue;
                    };
                    let found = exact.contains(v) || parents.iter().any(|p| v.compare(p) == Some(Ordering::Equal));
                    if !found {
                        out.push(single(id, t, format!("{child} value {v} has no match in {parent}")));
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.constraint_id, a.offending_tuple_ids.first(), &a.detail)
            .cmp(&(&b.constraint_id, b.offending_tuple_ids.first(), &b.detail))
    });
    Ok(out)
}

fn single(constraint_id: &str, t: &CandidateTuple, detail: String) -> Violation {
    Violation {
        constraint_id: constraint_id.to_string(),
        offending_tuple_ids: BTreeSet::from([t.tuple_id.clone()]),
        detail,
    }
}

fn functional_dependency(
    id: &str,
    rows: &[&CandidateTuple],
    determinant: &[String],
    dependent: &str,
) -> Vec<Violation> {
    let mut groups: BTreeMap<Vec<&Value>, Vec<&CandidateTuple>> = BTreeMap::new();
    for t in rows {
        let key: Option<Vec<&Value>> = determinant.iter().map(|a| t.value(a)).collect();
        if let (Some(key), Some(_)) = (key, t.value(dependent)) {
            groups.entry(key).or_default().push(t);
        }
    }
    let mut out = Vec::new();
    for (key, group) in groups {
        let distinct: BTreeSet<&Value> = group.iter().filter_map(|t| t.value(dependent)).collect();
        if distinct.len() < 2 {
            continue;
        }
        let key_text: Vec<String> = key.iter().map(|v| v.render()).collect();
        let values: Vec<String> = distinct.iter().map(|v| v.render()).collect();
        out.push(Violation {
            constraint_id: id.to_string(),
            offending_tuple_ids: group.iter().map(|t| t.tuple_id.clone()).collect(),
            detail: format!(
                "{} = ({}) has {} values {}",
                determinant.join(", "),
                key_text.join(", "),
                dependent,
                values.join(", ")
            ),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_date, AttrRef, AttributeDef, ChunkRef, DataType, TableDef, TupleStatus};
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(
            vec![
                TableDef::new(
                    "Person",
                    vec![
                        AttributeDef::new("Person_ID", DataType::Identifier),
                        AttributeDef::new("Date_of_Birth", DataType::Date),
                        AttributeDef::new("Age", DataType::Integer),
                        AttributeDef::new("Admission_Time", DataType::Date),
                        AttributeDef::new("Discharge_Time", DataType::Date),
                    ],
                ),
                TableDef::new("Company", vec![AttributeDef::new("Company_Ticker", DataType::Identifier)]),
                TableDef::new(
                    "Stock_Price",
                    vec![
                        AttributeDef::new("Company_Ticker", DataType::Identifier),
                        AttributeDef::new("Price", DataType::Real),
                    ],
                ),
            ],
            vec![],
        )
    }

    fn constraints() -> Vec<Constraint> {
        vec![
            Constraint::new(
                "fd",
                ConstraintKind::FunctionalDependency {
                    table: "Person".into(),
                    determinant: vec!["Person_ID".into()],
                    dependent: "Date_of_Birth".into(),
                },
            ),
            Constraint::new(
                "fk",
                ConstraintKind::ForeignKey {
                    child: AttrRef::new("Stock_Price", "Company_Ticker"),
                    parent: AttrRef::new("Company", "Company_Ticker"),
                },
            ),
            Constraint::new(
                "range",
                ConstraintKind::NumericRange {
                    table: "Person".into(),
                    attribute: "Age".into(),
                    min: 0.0,
                    max: 130.0,
                },
            ),
            Constraint::new(
                "temporal",
                ConstraintKind::Temporal {
                    table: "Person".into(),
                    earlier: "Admission_Time".into(),
                    later: "Discharge_Time".into(),
                    strict: true,
                },
            ),
        ]
    }

    fn tuple(id: &str, table: &str, values: &[(&str, Value)]) -> CandidateTuple {
        let mut t = CandidateTuple::new(id, table, ChunkRef::new("d", 0, 0, 1).unwrap());
        for (k, v) in values {
            t = t.with(k, Some(v.clone()));
        }
        t
    }

    fn date(s: &str) -> Value {
        Value::Date(parse_date(s).unwrap())
    }

    fn id(s: &str) -> Value {
        Value::Identifier(s.into())
    }

    fn run(tuples: &[CandidateTuple]) -> Vec<Violation> {
        let refs: Vec<&CandidateTuple> = tuples.iter().collect();
        validate_tuples(&schema(), &constraints(), &refs).unwrap()
    }

    #[test]
    fn functional_dependency_example() {
        let v = run(&[
            tuple("a", "Person", &[("Person_ID", id("p1")), ("Date_of_Birth", date("1990-01-01"))]),
            tuple("b", "Person", &[("Person_ID", id("p1")), ("Date_of_Birth", date("1991-02-02"))]),
        ]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].constraint_id, "fd");
        assert_eq!(v[0].offending_tuple_ids, BTreeSet::from(["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn temporal_example() {
        let v = run(&[tuple(
            "a",
            "Person",
            &[("Admission_Time", date("2020-05-01")), ("Discharge_Time", date("2020-04-30"))],
        )]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].constraint_id, "temporal");
        let same_day = run(&[tuple(
            "a",
            "Person",
            &[("Admission_Time", date("2020-05-01")), ("Discharge_Time", date("2020-05-01"))],
        )]);
        assert_eq!(same_day.len(), 1);
    }

    #[test]
    fn range_example() {
        let v = run(&[tuple("a", "Person", &[("Age", Value::Integer(180))])]);
        assert_eq!(v.len(), 1);
        assert!(v[0].detail.contains("180"));
        assert!(run(&[tuple("a", "Person", &[("Age", Value::Integer(130))])]).is_empty());
    }

    #[test]
    fn foreign_key_example() {
        let v = run(&[
            tuple("c", "Company", &[("Company_Ticker", id("abc"))]),
            tuple("s1", "Stock_Price", &[("Company_Ticker", id("xyz"))]),
            tuple("s2", "Stock_Price", &[("Company_Ticker", id("abc"))]),
        ]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].offending_tuple_ids, BTreeSet::from(["s1".to_string()]));
    }

    #[test]
    fn unknown_attribute_is_an_error() {
        let bad = vec![Constraint::new(
            "x",
            ConstraintKind::NumericRange {
                table: "Person".into(),
                attribute: "Height".into(),
                min: 0.0,
                max: 1.0,
            },
        )];
        assert!(validate_tuples(&schema(), &bad, &[]).is_err());
    }

    #[test]
    fn rejected_tuples_are_ignored_by_the_store() {
        let mut store = StagingStore::new(schema(), constraints()).unwrap();
        let mut t = tuple("a", "Person", &[("Age", Value::Integer(180))]);
        store.insert(t.clone()).unwrap();
        assert_eq!(validate_constraints(&store).unwrap().len(), 1);
        t.status = TupleStatus::Rejected;
        store.update("a", |x| *x = t).unwrap();
        assert!(validate_constraints(&store).unwrap().is_empty());
    }

    fn arb_person(i: usize) -> impl Strategy<Value = CandidateTuple> {
        (
            proptest::option::of(0u8..3),
            proptest::option::of(0u32..4),
            proptest::option::of(-5i64..140),
            proptest::option::of(0u32..5),
            proptest::option::of(0u32..5),
        )
            .prop_map(move |(pid, dob, age, adm, dis)| {
                let day = |d: u32| Value::Date(chrono::NaiveDate::from_ymd_opt(2020, 1, 1 + d).unwrap());
                let mut t = CandidateTuple::new(format!("p{i:03}"), "Person", ChunkRef::new("d", 0, 0, 1).unwrap());
                t = t.with("Person_ID", pid.map(|p| id(&format!("k{p}"))));
                t = t.with("Date_of_Birth", dob.map(day));
                t = t.with("Age", age.map(Value::Integer));
                t = t.with("Admission_Time", adm.map(day));
                t.with("Discharge_Time", dis.map(day))
            })
    }

    fn arb_people() -> impl Strategy<Value = Vec<CandidateTuple>> {
        (0usize..25).prop_flat_map(|n| (0..n).map(arb_person).collect::<Vec<_>>())
    }

    fn constrained_all_null(i: usize) -> CandidateTuple {
        CandidateTuple::new(format!("z{i}"), "Person", ChunkRef::new("d", 0, 0, 1).unwrap())
            .with("Person_ID", Some(id("k0")))
            .with("Date_of_Birth", None)
            .with("Age", None)
            .with("Admission_Time", None)
            .with("Discharge_Time", None)
    }

    /// Every violated tuple id per constraint, which is what monotonicity
    /// is stated over.
    fn offending(v: &[Violation]) -> BTreeSet<(String, String)> {
        v.iter()
            .flat_map(|x| x.offending_tuple_ids.iter().map(move |t| (x.constraint_id.clone(), t.clone())))
            .collect()
    }

    proptest! {
        #[test]
        fn nulls_never_add_violations(people in arb_people()) {
            let before = run(&people);
            let mut more = people.clone();
            more.push(constrained_all_null(0));
            let after = run(&more);
            prop_assert_eq!(before, after);
        }

        #[test]
        fn adding_a_tuple_never_removes_a_violation(people in arb_people(), extra in arb_person(999)) {
            let before = offending(&run(&people));
            let mut more = people.clone();
            more.push(extra);
            let after = offending(&run(&more));
            prop_assert!(before.is_subset(&after));
        }

        #[test]
        fn order_of_tuples_does_not_matter(people in arb_people()) {
            let mut reversed = people.clone();
            reversed.reverse();
            prop_assert_eq!(run(&people), run(&reversed));
        }

        #[test]
        fn fk_cleared_only_by_matching_parent(tickers in proptest::collection::vec(0u8..4, 1..6), parent in 0u8..4) {
            let children: Vec<CandidateTuple> = tickers
                .iter()
                .enumerate()
                .map(|(i, t)| tuple(&format!("s{i}"), "Stock_Price", &[("Company_Ticker", id(&format!("t{t}")))]))
                .collect();
            let before = offending(&run(&children));
            let mut more = children.clone();
            more.push(tuple("c", "Company", &[("Company_Ticker", id(&format!("t{parent}")))]));
            let after = offending(&run(&more));
            let cleared: BTreeSet<_> = before.difference(&after).cloned().collect();
            for (_, tid) in &cleared {
                let i: usize = tid[1..].parse().unwrap();
                prop_assert_eq!(tickers[i], parent);
            }
            prop_assert!(after.is_subset(&before));
        }
    }
}
