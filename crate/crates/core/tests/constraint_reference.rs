use std::collections::BTreeSet;

use docstruct_core::clear::validate_constraints;
use docstruct_testkit::constraints::{reference_violations, staging_store};
use docstruct_testkit::rng;

#[test]
fn validator_matches_pairwise_reference_on_random_stores() {
    for seed in 0..1000u64 {
        let store = staging_store(&mut rng(seed), 200);
        let got: BTreeSet<_> = validate_constraints(&store)
            .unwrap()
            .into_iter()
            .map(|v| (v.constraint_id, v.offending_tuple_ids))
            .collect();
        assert_eq!(got, reference_violations(&store), "seed {seed}");
    }
}

#[test]
fn every_kind_fires_somewhere() {
    let mut ids = BTreeSet::new();
    for seed in 0..50u64 {
        ids.extend(reference_violations(&staging_store(&mut rng(seed), 200)).into_iter().map(|(id, _)| id));
    }
    for id in ["fd_dob", "stay", "age_range", "price_company"] {
        assert!(ids.contains(id), "{id}");
    }
}
