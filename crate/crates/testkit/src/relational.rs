//! Random small databases and plans, and a nested-loop evaluator that
//! computes plan results straight from the relational-algebra definitions.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use docstruct_core::clear::RelationalStore;
use docstruct_core::model::{
    AttributeDef, CandidateTuple, ChunkRef, DataType, ProvenanceEntry, RowProvenance, Schema, TableDef, TupleStatus,
    Value,
};
use docstruct_core::relational::{
    AggExpr, AggFunc, CmpOp, ColumnRef, Literal, Operand, Plan, Predicate, SortKey,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub const MAX_TABLES: usize = 4;
pub const MAX_ROWS: usize = 8;
pub const MAX_DEPTH: usize = 4;

const REALS: [f64; 4] = [-1.25, 0.5, 1.0, 2.5];
const TAGS: [&str; 3] = ["x", "y", "z"];
const WORDS: [&str; 3] = ["a", "b", "c"];

pub fn table_name(i: usize) -> String {
    format!("T{i}")
}

/// Tables `T0..Tn` sharing the column names `k` and `tag`, so that joined
/// inputs need qualified references.
pub fn schema(n_tables: usize) -> Schema {
    let tables = (0..n_tables)
        .map(|i| {
            TableDef::new(
                &table_name(i),
                vec![
                    AttributeDef::new("k", DataType::Integer),
                    AttributeDef::new("tag", DataType::Identifier),
                    AttributeDef::new(&format!("r{i}"), DataType::Real),
                    AttributeDef::new(&format!("s{i}"), DataType::Text),
                ],
            )
        })
        .collect();
    Schema::new(tables, vec![])
}

fn sometimes<R: Rng>(rng: &mut R, v: Value) -> Option<Value> {
    (!rng.gen_bool(0.2)).then_some(v)
}

pub fn store<R: Rng>(rng: &mut R) -> RelationalStore {
    let n_tables = rng.gen_range(1..=MAX_TABLES);
    let schema = schema(n_tables);
    let mut rows = Vec::new();
    for i in 0..n_tables {
        for j in 0..rng.gen_range(0..=MAX_ROWS) {
            let src = ChunkRef::new(format!("d{i}"), j, 0, 1).unwrap();
            let k = Value::Integer(rng.gen_range(0..4));
            let tag = Value::Identifier(TAGS.choose(rng).unwrap().to_string());
            let r = Value::Real(*REALS.choose(rng).unwrap());
            let s = Value::Text(WORDS.choose(rng).unwrap().to_string());
            let mut t = CandidateTuple::new(format!("{}-{j}", table_name(i)), table_name(i), src)
                .with("k", sometimes(rng, k))
                .with("tag", sometimes(rng, tag))
                .with(&format!("r{i}"), sometimes(rng, r))
                .with(&format!("s{i}"), sometimes(rng, s));
            t.status = TupleStatus::Accepted;
            rows.push(t);
        }
    }
    RelationalStore::from_rows(schema, vec![], rows)
}

/// Output column as the reference tracks it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefColumn {
    pub table: Option<String>,
    pub name: String,
    pub datatype: DataType,
}

fn column_ref<R: Rng>(rng: &mut R, cols: &[RefColumn], i: usize) -> ColumnRef {
    let c = &cols[i];
    let unique = cols.iter().filter(|o| o.name == c.name).count() == 1;
    match &c.table {
        Some(t) if !unique || rng.gen_bool(0.5) => ColumnRef::qualified(t, &c.name),
        _ => ColumnRef::bare(&c.name),
    }
}

fn literal_for<R: Rng>(rng: &mut R, t: DataType) -> Literal {
    match t {
        DataType::Integer => Literal::Int(rng.gen_range(-1..5)),
        DataType::Real => {
            if rng.gen_bool(0.3) {
                Literal::Int(rng.gen_range(0..3))
            } else {
                Literal::Real(*REALS.choose(rng).unwrap())
            }
        }
        DataType::Identifier => {
            let tag = TAGS.choose(rng).unwrap();
            Literal::Text(if rng.gen_bool(0.3) { tag.to_uppercase() } else { tag.to_string() })
        }
        DataType::Boolean => Literal::Bool(rng.gen()),
        _ => Literal::Text(WORDS.choose(rng).unwrap().to_string()),
    }
}

fn cmp_op<R: Rng>(rng: &mut R) -> CmpOp {
    *[CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge].choose(rng).unwrap()
}

fn predicate<R: Rng>(rng: &mut R, cols: &[RefColumn], depth: usize) -> Predicate {
    let roll = if depth == 0 { rng.gen_range(0..3) } else { rng.gen_range(0..6) };
    let i = rng.gen_range(0..cols.len());
    match roll {
        0 | 1 => {
            let left = Operand::col(column_ref(rng, cols, i));
            let peers: Vec<usize> = (0..cols.len()).filter(|&j| j != i && cols[j].datatype == cols[i].datatype).collect();
            let right = match peers.choose(rng) {
                Some(&j) if rng.gen_bool(0.3) => Operand::col(column_ref(rng, cols, j)),
                _ => Operand::lit(literal_for(rng, cols[i].datatype)),
            };
            Predicate::Compare {
                left,
                cmp: cmp_op(rng),
                right,
            }
        }
        2 => Predicate::IsNull {
            column: column_ref(rng, cols, i),
            negated: rng.gen(),
        },
        3 => Predicate::And {
            args: vec![predicate(rng, cols, depth - 1), predicate(rng, cols, depth - 1)],
        },
        4 => Predicate::Or {
            args: vec![predicate(rng, cols, depth - 1), predicate(rng, cols, depth - 1)],
        },
        _ => Predicate::Not {
            arg: Box::new(predicate(rng, cols, depth - 1)),
        },
    }
}

fn scan_columns(schema: &Schema, table: &str) -> Vec<RefColumn> {
    schema
        .table(table)
        .map(|t| {
            t.attributes
                .iter()
                .map(|a| RefColumn {
                    table: Some(t.name.clone()),
                    name: a.name.clone(),
                    datatype: a.datatype,
                })
                .collect()
        })
        .unwrap_or_default()
}

fn grow<R: Rng>(rng: &mut R, schema: &Schema, budget: usize) -> (Plan, Vec<RefColumn>) {
    let names: Vec<&str> = schema.tables.iter().map(|t| t.name.as_str()).collect();
    let leaf = |rng: &mut R| {
        let t = names.choose(rng).unwrap();
        (Plan::scan(t), scan_columns(schema, t))
    };
    if budget <= 1 {
        return leaf(rng);
    }
    match rng.gen_range(0..100) {
        0..=11 => leaf(rng),
        12..=36 => {
            let (p, cols) = child(rng, schema, budget - 1);
            let pred = predicate(rng, &cols, 2);
            (p.filter(pred), cols)
        }
        37..=64 => {
            let (l, lc) = child(rng, schema, budget - 1);
            let (r, rc) = child(rng, schema, budget - 1);
            let pairs: Vec<(usize, usize)> = (0..lc.len())
                .flat_map(|i| (0..rc.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| lc[i].datatype == rc[j].datatype)
                .collect();
            let Some(&(i, j)) = pairs.choose(rng) else {
                return (l, lc);
            };
            let on_l = column_ref(rng, &lc, i);
            let on_r = column_ref(rng, &rc, j);
            let mut cols = lc;
            cols.extend(rc);
            (l.join(r, on_l, on_r), cols)
        }
        65..=75 => {
            let (p, cols) = child(rng, schema, budget - 1);
            let mut idx: Vec<usize> = (0..cols.len()).collect();
            idx.shuffle(rng);
            let groups: Vec<usize> = idx.into_iter().take(rng.gen_range(0..=2)).collect();
            let group_by: Vec<ColumnRef> = groups.iter().map(|&i| column_ref(rng, &cols, i)).collect();
            let mut aggs = Vec::new();
            for _ in 0..rng.gen_range(1..=2) {
                let i = rng.gen_range(0..cols.len());
                let numeric = matches!(cols[i].datatype, DataType::Integer | DataType::Real);
                let funcs: &[AggFunc] = if numeric {
                    &[AggFunc::Count, AggFunc::Sum, AggFunc::Avg, AggFunc::Min, AggFunc::Max]
                } else {
                    &[AggFunc::Count, AggFunc::Min, AggFunc::Max]
                };
                let func = *funcs.choose(rng).unwrap();
                let column = if func == AggFunc::Count && rng.gen_bool(0.4) {
                    None
                } else {
                    Some(column_ref(rng, &cols, i))
                };
                aggs.push(AggExpr::new(func, column));
            }
            let plan = p.aggregate(group_by, aggs);
            (plan, Vec::new())
        }
        76..=85 => {
            let (p, cols) = child(rng, schema, budget - 1);
            let mut idx: Vec<usize> = (0..cols.len()).collect();
            idx.shuffle(rng);
            idx.truncate(rng.gen_range(1..=cols.len().min(3)));
            let refs = idx.iter().map(|&i| column_ref(rng, &cols, i)).collect();
            (p.project(refs), Vec::new())
        }
        86..=93 => {
            let (p, cols) = child(rng, schema, budget - 1);
            let keys = (0..rng.gen_range(1..=2))
                .map(|_| {
                    let i = rng.gen_range(0..cols.len());
                    SortKey {
                        column: column_ref(rng, &cols, i),
                        descending: rng.gen(),
                    }
                })
                .collect();
            (p.sort(keys), cols)
        }
        _ => {
            let (p, cols) = child(rng, schema, budget - 1);
            (p.limit(rng.gen_range(0..=5)), cols)
        }
    }
}

/// A random plan of depth at most [`MAX_DEPTH`] that validates against
/// `schema`.
pub fn plan<R: Rng>(rng: &mut R, schema: &Schema) -> Plan {
    loop {
        let (p, _) = grow(rng, schema, MAX_DEPTH);
        if p.depth() <= MAX_DEPTH && p.validate(schema).is_ok() {
            return p;
        }
    }
}

fn child<R: Rng>(rng: &mut R, schema: &Schema, budget: usize) -> (Plan, Vec<RefColumn>) {
    loop {
        let (p, cols) = grow(rng, schema, budget);
        if !cols.is_empty() {
            return (p, cols);
        }
        if let Ok(cols) = output_columns(&p, schema) {
            if !cols.is_empty() {
                return (p, cols);
            }
        }
    }
}

/// Result rows as `(values, provenance)` pairs in the order the plan defines.
#[derive(Debug, Clone, PartialEq)]
pub struct RefRelation {
    pub columns: Vec<RefColumn>,
    pub rows: Vec<(Vec<Option<Value>>, RowProvenance)>,
    pub ordered: bool,
}

impl RefRelation {
    pub fn multiset(&self) -> Vec<(Vec<Option<Value>>, RowProvenance)> {
        let mut rows = self.rows.clone();
        rows.sort();
        rows
    }
}

fn find(cols: &[RefColumn], r: &ColumnRef) -> Result<usize, String> {
    let mut hit = None;
    for (i, c) in cols.iter().enumerate() {
        if c.name == r.name && r.table.as_ref().map_or(true, |t| c.table.as_ref() == Some(t)) {
            if hit.is_some() {
                return Err(format!("ambiguous {r}"));
            }
            hit = Some(i);
        }
    }
    hit.ok_or_else(|| format!("unknown {r}"))
}

fn output_columns(plan: &Plan, schema: &Schema) -> Result<Vec<RefColumn>, String> {
    let empty = RelationalStore::from_rows(schema.clone(), vec![], vec![]);
    evaluate(plan, &empty).map(|r| r.columns)
}

fn operand(cols: &[RefColumn], row: &[Option<Value>], o: &Operand) -> Result<Option<Value>, String> {
    Ok(match o {
        Operand::Column { column } => row[find(cols, column)?].clone(),
        Operand::Literal { value } => Some(value.to_value()),
    })
}

fn truth(cols: &[RefColumn], row: &[Option<Value>], p: &Predicate) -> Result<Option<bool>, String> {
    Ok(match p {
        Predicate::Compare { left, cmp, right } => {
            match (operand(cols, row, left)?, operand(cols, row, right)?) {
                (Some(a), Some(b)) => {
                    let ord = a.compare(&b).ok_or_else(|| format!("incomparable {a:?} {b:?}"))?;
                    Some(cmp.holds(ord))
                }
                _ => None,
            }
        }
        Predicate::IsNull { column, negated } => Some(row[find(cols, column)?].is_none() != *negated),
        Predicate::And { args } => {
            let mut acc = Some(true);
            for a in args {
                match truth(cols, row, a)? {
                    Some(false) => return Ok(Some(false)),
                    None => acc = None,
                    Some(true) => {}
                }
            }
            acc
        }
        Predicate::Or { args } => {
            let mut acc = Some(false);
            for a in args {
                match truth(cols, row, a)? {
                    Some(true) => return Ok(Some(true)),
                    None => acc = None,
                    Some(false) => {}
                }
            }
            acc
        }
        Predicate::Not { arg } => truth(cols, row, arg)?.map(|b| !b),
    })
}

fn aggregate_value(func: AggFunc, datatype: DataType, vals: &[Value], rows: usize, star: bool) -> Result<Option<Value>, String> {
    if func == AggFunc::Count {
        return Ok(Some(Value::Integer(if star { rows } else { vals.len() } as i64)));
    }
    if vals.is_empty() {
        return Ok(None);
    }
    let extreme = |want: Ordering| {
        let mut best = vals[0].clone();
        for v in &vals[1..] {
            if v.compare(&best) == Some(want) {
                best = v.clone();
            }
        }
        best
    };
    Ok(Some(match func {
        AggFunc::Min => extreme(Ordering::Less),
        AggFunc::Max => extreme(Ordering::Greater),
        AggFunc::Sum if datatype == DataType::Integer => {
            let mut s: i64 = 0;
            for v in vals {
                if let Value::Integer(i) = v {
                    s = s.checked_add(*i).ok_or("integer overflow")?;
                }
            }
            Value::Integer(s)
        }
        AggFunc::Sum => Value::Real(vals.iter().filter_map(Value::as_f64).sum()),
        AggFunc::Avg => Value::Real(vals.iter().filter_map(Value::as_f64).sum::<f64>() / vals.len() as f64),
        AggFunc::Count => unreachable!(),
    }))
}

/// Evaluates `plan` over `db` by nested loops and per-group scans.
pub fn evaluate(plan: &Plan, db: &RelationalStore) -> Result<RefRelation, String> {
    match plan {
        Plan::Scan { table } => {
            let columns = scan_columns(&db.schema, table);
            if columns.is_empty() {
                return Err(format!("no table {table}"));
            }
            let rows = db
                .rows(table)
                .iter()
                .map(|t| {
                    let values = columns.iter().map(|c| t.value(&c.name).cloned()).collect();
                    let prov = BTreeSet::from([ProvenanceEntry {
                        tuple_id: t.tuple_id.clone(),
                        source: t.source.clone(),
                    }]);
                    (values, prov)
                })
                .collect();
            Ok(RefRelation {
                columns,
                rows,
                ordered: false,
            })
        }
        Plan::Filter { input, predicate } => {
            let mut rel = evaluate(input, db)?;
            let mut kept = Vec::new();
            for (v, p) in rel.rows {
                if truth(&rel.columns, &v, predicate)? == Some(true) {
                    kept.push((v, p));
                }
            }
            rel.rows = kept;
            Ok(rel)
        }
        Plan::Join { left, right, on } => {
            let l = evaluate(left, db)?;
            let r = evaluate(right, db)?;
            let li = find(&l.columns, &on.left)?;
            let ri = find(&r.columns, &on.right)?;
            let mut rows = Vec::new();
            for (lv, lp) in &l.rows {
                for (rv, rp) in &r.rows {
                    let matched = match (&lv[li], &rv[ri]) {
                        (Some(a), Some(b)) => a.compare(b) == Some(Ordering::Equal),
                        _ => false,
                    };
                    if matched {
                        let mut v = lv.clone();
                        v.extend(rv.iter().cloned());
                        rows.push((v, lp.union(rp).cloned().collect()));
                    }
                }
            }
            let mut columns = l.columns;
            columns.extend(r.columns);
            Ok(RefRelation {
                columns,
                rows,
                ordered: false,
            })
        }
        Plan::Aggregate {
            input,
            group_by,
            aggregates,
        } => {
            let rel = evaluate(input, db)?;
            let gi: Vec<usize> = group_by.iter().map(|g| find(&rel.columns, g)).collect::<Result<_, _>>()?;
            let mut columns: Vec<RefColumn> = gi.iter().map(|&i| rel.columns[i].clone()).collect();
            let mut agg_cols = Vec::new();
            for a in aggregates {
                let idx = a.column.as_ref().map(|c| find(&rel.columns, c)).transpose()?;
                let datatype = match (a.func, idx) {
                    (AggFunc::Count, _) => DataType::Integer,
                    (AggFunc::Avg, _) => DataType::Real,
                    (_, Some(i)) => rel.columns[i].datatype,
                    (_, None) => return Err("aggregate needs a column".into()),
                };
                agg_cols.push((a.func, idx, datatype));
                columns.push(RefColumn {
                    table: None,
                    name: a.output_name(),
                    datatype,
                });
            }
            let mut keys: Vec<Vec<Option<Value>>> = Vec::new();
            for (v, _) in &rel.rows {
                let k: Vec<Option<Value>> = gi.iter().map(|&i| v[i].clone()).collect();
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            if gi.is_empty() && keys.is_empty() {
                keys.push(Vec::new());
            }
            let mut rows = Vec::new();
            for k in keys {
                let members: Vec<&(Vec<Option<Value>>, RowProvenance)> = rel
                    .rows
                    .iter()
                    .filter(|(v, _)| gi.iter().map(|&i| v[i].clone()).collect::<Vec<_>>() == k)
                    .collect();
                let mut out = k.clone();
                for &(func, idx, datatype) in &agg_cols {
                    let vals: Vec<Value> = match idx {
                        Some(i) => members.iter().filter_map(|(v, _)| v[i].clone()).collect(),
                        None => Vec::new(),
                    };
                    out.push(aggregate_value(func, datatype, &vals, members.len(), idx.is_none())?);
                }
                let prov: RowProvenance = members.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
                rows.push((out, prov));
            }
            Ok(RefRelation {
                columns,
                rows,
                ordered: false,
            })
        }
        Plan::Project { input, columns } => {
            let rel = evaluate(input, db)?;
            let idx: Vec<usize> = columns.iter().map(|c| find(&rel.columns, c)).collect::<Result<_, _>>()?;
            Ok(RefRelation {
                columns: idx.iter().map(|&i| rel.columns[i].clone()).collect(),
                rows: rel
                    .rows
                    .into_iter()
                    .map(|(v, p)| (idx.iter().map(|&i| v[i].clone()).collect(), p))
                    .collect(),
                ordered: rel.ordered,
            })
        }
        Plan::Sort { input, keys } => {
            let mut rel = evaluate(input, db)?;
            let idx: Vec<(usize, bool)> = keys
                .iter()
                .map(|k| find(&rel.columns, &k.column).map(|i| (i, k.descending)))
                .collect::<Result<_, _>>()?;
            rel.rows.sort_by(|a, b| {
                for &(i, desc) in &idx {
                    let o = a.0[i].cmp(&b.0[i]);
                    let o = if desc { o.reverse() } else { o };
                    if o != Ordering::Equal {
                        return o;
                    }
                }
                a.cmp(b)
            });
            rel.ordered = true;
            Ok(rel)
        }
        Plan::Limit { input, n } => {
            let mut rel = evaluate(input, db)?;
            if !rel.ordered {
                rel.rows.sort();
            }
            rel.rows.truncate(*n);
            Ok(rel)
        }
    }
}
