use docstruct_core::relational::{emit_sql, execute_plan, optimize_plan, parse_sql, TableStats};
use docstruct_testkit::relational::{evaluate, plan, store};
use docstruct_testkit::rng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn executor_agrees_with_nested_loops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let got = execute_plan(&p, &db).unwrap();
        let want = evaluate(&p, &db).unwrap();
        prop_assert_eq!(got.sorted_rows(), want.multiset(), "{}", emit_sql(&p));
        if want.ordered {
            let rows: Vec<_> = got.rows.iter().cloned().zip(got.provenance.rows.iter().cloned()).collect();
            prop_assert_eq!(rows, want.rows);
        }
        for row in &got.provenance.rows {
            for e in row {
                prop_assert!(db.tuple(&e.tuple_id).is_some());
            }
        }
    }

    #[test]
    fn optimizer_keeps_results_and_settles(seed in any::<u64>()) {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let stats = TableStats::from_store(&db);
        let o = optimize_plan(&p, &db.schema, &stats);
        o.validate(&db.schema).unwrap();
        let a = execute_plan(&p, &db).unwrap();
        let b = execute_plan(&o, &db).unwrap();
        prop_assert_eq!(&a.columns, &b.columns);
        prop_assert_eq!(a.sorted_rows(), b.sorted_rows());
        prop_assert_eq!(optimize_plan(&o, &db.schema, &stats), o);
    }

    #[test]
    fn sql_text_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let db = store(&mut r);
        let p = plan(&mut r, &db.schema);
        let sql = emit_sql(&p);
        let back = parse_sql(&sql).unwrap();
        prop_assert_eq!(execute_plan(&back, &db).unwrap(), execute_plan(&p, &db).unwrap(), "{}", sql);
    }
}
