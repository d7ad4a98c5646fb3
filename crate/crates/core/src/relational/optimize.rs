//! Filter pushdown and greedy join ordering.

use std::collections::BTreeMap;

use super::plan::{resolve_column, Column, ColumnRef, JoinOn, Operand, Plan, Predicate};
use crate::clear::RelationalStore;
use crate::model::Schema;

/// Estimated fraction of rows kept by one filter conjunct.
pub const FILTER_SELECTIVITY: f64 = 0.3;
/// Join regions with fewer inputs keep their written order.
const MIN_REORDER_INPUTS: usize = 3;

/// Per-table row counts used by the cost model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableStats {
    pub rows: BTreeMap<String, usize>,
}

impl TableStats {
    pub fn from_store(db: &RelationalStore) -> Self {
        Self {
            rows: db
                .schema
                .tables
                .iter()
                .map(|t| (t.name.clone(), db.rows(&t.name).len()))
                .collect(),
        }
    }

    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        Self {
            rows: counts.into_iter().map(|(t, n)| (t.to_string(), n)).collect(),
        }
    }
}

/// Cardinality estimate: base row counts, times the selectivity per filter
/// conjunct.
pub fn estimate(plan: &Plan, stats: &TableStats) -> f64 {
    match plan {
        Plan::Scan { table } => stats.rows.get(table).copied().unwrap_or(0) as f64,
        Plan::Filter { input, predicate } => {
            estimate(input, stats) * FILTER_SELECTIVITY.powi(predicate.clone().conjuncts().len() as i32)
        }
        Plan::Join { left, right, .. } => estimate(left, stats) * estimate(right, stats),
        Plan::Aggregate { input, group_by, .. } => {
            if group_by.is_empty() {
                1.0
            } else {
                estimate(input, stats)
            }
        }
        Plan::Limit { input, n } => estimate(input, stats).min(*n as f64),
        Plan::Project { input, .. } | Plan::Sort { input, .. } => estimate(input, stats),
    }
}

/// Rewrites a valid plan. Filters over a single input of a join region move
/// down onto that input; regions of three or more inputs are rebuilt
/// left-deep in ascending estimated size. Deterministic and idempotent.
pub fn optimize_plan(plan: &Plan, schema: &Schema, stats: &TableStats) -> Plan {
    match plan {
        Plan::Scan { .. } => plan.clone(),
        Plan::Filter { .. } | Plan::Join { .. } => optimize_region(plan, schema, stats),
        Plan::Aggregate {
            input,
            group_by,
            aggregates,
        } => optimize_plan(input, schema, stats).aggregate(group_by.clone(), aggregates.clone()),
        Plan::Project { input, columns } => optimize_plan(input, schema, stats).project(columns.clone()),
        Plan::Sort { input, keys } => optimize_plan(input, schema, stats).sort(keys.clone()),
        Plan::Limit { input, n } => optimize_plan(input, schema, stats).limit(*n),
    }
}

/// Join tree over region inputs, filters stripped. Each join keeps its
/// written condition and a copy qualified against its own inputs.
enum Shape {
    Leaf(usize),
    Join(Box<Shape>, Box<Shape>, JoinOn, JoinOn),
}

/// Filter conjuncts as written and qualified.
struct Region {
    leaves: Vec<Plan>,
    filters: Vec<(Predicate, Predicate)>,
}

fn qualify(r: &ColumnRef, cols: &[Column]) -> ColumnRef {
    match resolve_column(cols, r) {
        Ok(i) if cols[i].table.is_some() => cols[i].as_ref(),
        _ => r.clone(),
    }
}

fn qualify_operand(o: &Operand, cols: &[Column]) -> Operand {
    match o {
        Operand::Column { column } => Operand::col(qualify(column, cols)),
        lit => lit.clone(),
    }
}

fn qualify_predicate(p: &Predicate, cols: &[Column]) -> Predicate {
    match p {
        Predicate::Compare { left, cmp, right } => Predicate::Compare {
            left: qualify_operand(left, cols),
            cmp: *cmp,
            right: qualify_operand(right, cols),
        },
        Predicate::IsNull { column, negated } => Predicate::IsNull {
            column: qualify(column, cols),
            negated: *negated,
        },
        Predicate::And { args } => Predicate::And {
            args: args.iter().map(|a| qualify_predicate(a, cols)).collect(),
        },
        Predicate::Or { args } => Predicate::Or {
            args: args.iter().map(|a| qualify_predicate(a, cols)).collect(),
        },
        Predicate::Not { arg } => Predicate::Not {
            arg: Box::new(qualify_predicate(arg, cols)),
        },
    }
}

fn flatten(plan: &Plan, region: &mut Region, schema: &Schema, stats: &TableStats) -> Shape {
    match plan {
        Plan::Join { left, right, on } => {
            let l = flatten(left, region, schema, stats);
            let r = flatten(right, region, schema, stats);
            let lc = left.output(schema).unwrap_or_default();
            let rc = right.output(schema).unwrap_or_default();
            let q = JoinOn {
                left: qualify(&on.left, &lc),
                right: qualify(&on.right, &rc),
            };
            Shape::Join(Box::new(l), Box::new(r), on.clone(), q)
        }
        Plan::Filter { input, predicate } => {
            let shape = flatten(input, region, schema, stats);
            let cols = input.output(schema).unwrap_or_default();
            region
                .filters
                .extend(predicate.clone().conjuncts().into_iter().map(|c| {
                    let q = qualify_predicate(&c, &cols);
                    (c, q)
                }));
            shape
        }
        other => {
            region.leaves.push(optimize_plan(other, schema, stats));
            Shape::Leaf(region.leaves.len() - 1)
        }
    }
}

/// The single input owning every column `refs` mentions, if there is one.
fn owner(refs: &[&ColumnRef], outputs: &[Vec<Column>]) -> Option<usize> {
    let mut found: Option<usize> = None;
    for r in refs {
        let owners: Vec<usize> = (0..outputs.len())
            .filter(|&i| resolve_column(&outputs[i], r).is_ok())
            .collect();
        match (owners.as_slice(), found) {
            ([i], None) => found = Some(*i),
            ([i], Some(f)) if *i == f => {}
            _ => return None,
        }
    }
    found
}

fn with_filters(plan: Plan, preds: Vec<Predicate>) -> Plan {
    match Predicate::all(preds) {
        Some(p) => plan.filter(p),
        None => plan,
    }
}

fn build(shape: &Shape, leaves: &mut [Option<Plan>]) -> Plan {
    match shape {
        Shape::Leaf(i) => leaves[*i].take().expect("leaf used once"),
        Shape::Join(l, r, on, _) => {
            let left = build(l, leaves);
            let right = build(r, leaves);
            left.join(right, on.left.clone(), on.right.clone())
        }
    }
}

fn collect_joins(shape: &Shape, out: &mut Vec<JoinOn>) {
    if let Shape::Join(l, r, _, q) = shape {
        collect_joins(l, out);
        collect_joins(r, out);
        out.push(q.clone());
    }
}

fn optimize_region(plan: &Plan, schema: &Schema, stats: &TableStats) -> Plan {
    let mut region = Region {
        leaves: Vec::new(),
        filters: Vec::new(),
    };
    let shape = flatten(plan, &mut region, schema, stats);
    let outputs: Vec<Vec<Column>> = match region.leaves.iter().map(|l| l.output(schema)).collect() {
        Ok(o) => o,
        Err(_) => return plan.clone(),
    };
    let n = region.leaves.len();
    let mut pushed: Vec<Vec<Predicate>> = vec![Vec::new(); n];
    let mut above = Vec::new();
    for (p, q) in region.filters {
        match owner(&q.columns(), &outputs) {
            Some(i) => pushed[i].push(p),
            None => above.push(q),
        }
    }
    let filtered: Vec<Plan> = region
        .leaves
        .into_iter()
        .zip(pushed)
        .map(|(leaf, preds)| with_filters(leaf, preds))
        .collect();

    let mut slots: Vec<Option<Plan>> = filtered.iter().cloned().map(Some).collect();
    let written = with_filters(build(&shape, &mut slots), above.clone());
    if written.validate(schema).is_err() {
        return plan.clone();
    }
    if n < MIN_REORDER_INPUTS {
        return written;
    }
    match reorder(&shape, &filtered, &outputs, stats) {
        Some(order) if order.windows(2).any(|w| w[0] > w[1]) || !is_left_deep(&shape) => {
            let Ok(original) = plan.output(schema) else {
                return written;
            };
            let mut joins = Vec::new();
            collect_joins(&shape, &mut joins);
            let Some(rebuilt) = left_deep(&order, &filtered, &outputs, &joins) else {
                return written;
            };
            let restored = if rebuilt.output(schema).map(|c| c == original).unwrap_or(false) {
                rebuilt
            } else {
                rebuilt.project(original.iter().map(Column::as_ref).collect())
            };
            let candidate = with_filters(restored, above);
            match candidate.output(schema) {
                Ok(cols) if cols == original => candidate,
                _ => written,
            }
        }
        _ => written,
    }
}

fn is_left_deep(shape: &Shape) -> bool {
    match shape {
        Shape::Leaf(_) => true,
        Shape::Join(l, r, ..) => matches!(**r, Shape::Leaf(_)) && is_left_deep(l),
    }
}

fn leaf_of(r: &ColumnRef, outputs: &[Vec<Column>]) -> Option<usize> {
    owner(&[r], outputs)
}

/// Greedy order: the smallest input first, then repeatedly the smallest
/// input joined to those already placed. Ties go to the written order.
fn reorder(shape: &Shape, inputs: &[Plan], outputs: &[Vec<Column>], stats: &TableStats) -> Option<Vec<usize>> {
    let mut joins = Vec::new();
    collect_joins(shape, &mut joins);
    let mut edges = Vec::new();
    for on in &joins {
        edges.push((leaf_of(&on.left, outputs)?, leaf_of(&on.right, outputs)?));
    }
    let sizes: Vec<f64> = inputs.iter().map(|p| estimate(p, stats)).collect();
    let smallest = |cands: &mut dyn Iterator<Item = usize>| {
        cands.fold(None, |best: Option<usize>, i| match best {
            Some(b) if sizes[b] <= sizes[i] => Some(b),
            _ => Some(i),
        })
    };
    let mut order = vec![smallest(&mut (0..inputs.len()))?];
    while order.len() < inputs.len() {
        let next = smallest(&mut (0..inputs.len()).filter(|i| {
            !order.contains(i)
                && edges
                    .iter()
                    .any(|&(a, b)| (a == *i && order.contains(&b)) || (b == *i && order.contains(&a)))
        }))?;
        order.push(next);
    }
    Some(order)
}

fn left_deep(order: &[usize], inputs: &[Plan], outputs: &[Vec<Column>], joins: &[JoinOn]) -> Option<Plan> {
    let mut used = vec![false; joins.len()];
    let mut placed = vec![order[0]];
    let mut plan = inputs[order[0]].clone();
    for &next in &order[1..] {
        let (j, on) = joins.iter().enumerate().find_map(|(j, on)| {
            if used[j] {
                return None;
            }
            let (a, b) = (leaf_of(&on.left, outputs)?, leaf_of(&on.right, outputs)?);
            if b == next && placed.contains(&a) {
                Some((j, on.clone()))
            } else if a == next && placed.contains(&b) {
                Some((
                    j,
                    JoinOn {
                        left: on.right.clone(),
                        right: on.left.clone(),
                    },
                ))
            } else {
                None
            }
        })?;
        used[j] = true;
        placed.push(next);
        plan = plan.join(inputs[next].clone(), on.left, on.right);
    }
    used.iter().all(|u| *u).then_some(plan)
}
