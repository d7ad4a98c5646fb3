//! Plan execution over a committed store with per-row provenance.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use chrono::NaiveTime;

use super::plan::{resolve_column, AggExpr, AggFunc, Column, Operand, Plan, Predicate};
use super::{RelationalError, ResultSet};
use crate::clear::RelationalStore;
use crate::model::{normalize_identifier, DataType, ProvenanceChain, ProvenanceEntry, RowProvenance, Value};

pub type Cell = Option<Value>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Row {
    pub values: Vec<Cell>,
    pub provenance: RowProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
    /// Rows are in the order of an explicit sort rather than canonical order.
    pub sorted: bool,
}

impl Relation {
    fn canonical(mut self) -> Self {
        self.rows.sort();
        self.sorted = false;
        self
    }
}

fn exec_error(node: &Plan, message: impl Into<String>) -> RelationalError {
    RelationalError::Execution {
        node: node.kind(),
        message: message.into(),
    }
}

/// Three-valued comparison: `None` when either side is null.
fn compare_cells(node: &Plan, a: &Cell, b: &Cell) -> Result<Option<Ordering>, RelationalError> {
    match (a, b) {
        (Some(x), Some(y)) => x
            .compare(y)
            .map(Some)
            .ok_or_else(|| exec_error(node, format!("cannot compare {} with {}", x.datatype(), y.datatype()))),
        _ => Ok(None),
    }
}

fn operand(columns: &[Column], row: &Row, o: &Operand) -> Result<Cell, String> {
    Ok(match o {
        Operand::Column { column } => row.values[resolve_column(columns, column)?].clone(),
        Operand::Literal { value } => Some(value.to_value()),
    })
}

/// Kleene evaluation; `None` is unknown.
pub fn eval_predicate(node: &Plan, columns: &[Column], row: &Row, p: &Predicate) -> Result<Option<bool>, RelationalError> {
    match p {
        Predicate::Compare { left, cmp, right } => {
            let l = operand(columns, row, left).map_err(|e| exec_error(node, e))?;
            let r = operand(columns, row, right).map_err(|e| exec_error(node, e))?;
            Ok(compare_cells(node, &l, &r)?.map(|o| cmp.holds(o)))
        }
        Predicate::IsNull { column, negated } => {
            let i = resolve_column(columns, column).map_err(|e| exec_error(node, e))?;
            Ok(Some(row.values[i].is_none() != *negated))
        }
        Predicate::And { args } => {
            let mut unknown = false;
            for a in args {
                match eval_predicate(node, columns, row, a)? {
                    Some(false) => return Ok(Some(false)),
                    None => unknown = true,
                    Some(true) => {}
                }
            }
            Ok(if unknown { None } else { Some(true) })
        }
        Predicate::Or { args } => {
            let mut unknown = false;
            for a in args {
                match eval_predicate(node, columns, row, a)? {
                    Some(true) => return Ok(Some(true)),
                    None => unknown = true,
                    Some(false) => {}
                }
            }
            Ok(if unknown { None } else { Some(false) })
        }
        Predicate::Not { arg } => Ok(eval_predicate(node, columns, row, arg)?.map(|b| !b)),
    }
}

/// Hashable join key under the coercions of [`Value::compare`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum JoinKey {
    Exact(Value),
    Number(u64),
    Instant(chrono::NaiveDateTime),
}

fn join_key(v: &Value, own: DataType, other: DataType) -> JoinKey {
    match v {
        Value::Integer(_) | Value::Real(_) if own != other => {
            let x = v.as_f64().expect("numeric");
            JoinKey::Number(if x == 0.0 { 0.0f64.to_bits() } else { x.to_bits() })
        }
        Value::Text(s) if other == DataType::Identifier => JoinKey::Exact(Value::Identifier(normalize_identifier(s))),
        Value::Date(d) if own != other => JoinKey::Instant(d.and_time(NaiveTime::MIN)),
        Value::Datetime(dt) if own != other => JoinKey::Instant(*dt),
        other_value => JoinKey::Exact(other_value.clone()),
    }
}

fn aggregate_value(node: &Plan, agg: &AggExpr, datatype: DataType, cells: &[&Cell], rows: usize) -> Result<Cell, RelationalError> {
    let present: Vec<&Value> = cells.iter().filter_map(|c| c.as_ref()).collect();
    Ok(match agg.func {
        AggFunc::Count if agg.column.is_none() => Some(Value::Integer(rows as i64)),
        AggFunc::Count => Some(Value::Integer(present.len() as i64)),
        _ if present.is_empty() => None,
        AggFunc::Min => present.iter().min().map(|v| (*v).clone()),
        AggFunc::Max => present.iter().max().map(|v| (*v).clone()),
        AggFunc::Sum if datatype == DataType::Integer => {
            let mut total: i64 = 0;
            for v in &present {
                let Value::Integer(i) = v else {
                    return Err(exec_error(node, format!("sum over {}", v.datatype())));
                };
                total = total.checked_add(*i).ok_or_else(|| exec_error(node, "integer overflow in sum"))?;
            }
            Some(Value::Integer(total))
        }
        AggFunc::Sum | AggFunc::Avg => {
            let mut xs = Vec::with_capacity(present.len());
            for v in &present {
                xs.push(v.as_f64().ok_or_else(|| exec_error(node, format!("{} over {}", agg.func.name(), v.datatype())))?);
            }
            // Summation order fixed so results do not depend on input order.
            xs.sort_by(f64::total_cmp);
            let sum: f64 = xs.iter().sum();
            if agg.func == AggFunc::Sum {
                Some(Value::Real(sum))
            } else {
                Some(Value::Real(sum / xs.len() as f64))
            }
        }
    })
}

/// Executes `plan` bottom-up. Unsorted outputs are in canonical row order.
pub fn execute_relation(plan: &Plan, db: &RelationalStore) -> Result<Relation, RelationalError> {
    let columns = plan.output(&db.schema)?;
    match plan {
        Plan::Scan { table } => {
            let def = db.schema.table(table).expect("validated");
            let rows = db
                .rows(table)
                .iter()
                .map(|t| {
                    let values: Vec<Cell> = def
                        .attributes
                        .iter()
                        .map(|a| t.values.get(&a.name).cloned().flatten())
                        .collect();
                    for (v, a) in values.iter().zip(&def.attributes) {
                        if let Some(v) = v {
                            if !v.datatype().compatible_with(a.datatype) {
                                return Err(exec_error(
                                    plan,
                                    format!("{}.{} holds {} in {}", table, a.name, v.datatype(), t.tuple_id),
                                ));
                            }
                        }
                    }
                    Ok(Row {
                        values,
                        provenance: [ProvenanceEntry {
                            tuple_id: t.tuple_id.clone(),
                            source: t.source.clone(),
                        }]
                        .into(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Relation {
                columns,
                rows,
                sorted: false,
            }
            .canonical())
        }
        Plan::Filter { input, predicate } => {
            let rel = execute_relation(input, db)?;
            let mut rows = Vec::new();
            for row in rel.rows {
                if eval_predicate(plan, &rel.columns, &row, predicate)? == Some(true) {
                    rows.push(row);
                }
            }
            Ok(Relation {
                columns,
                rows,
                sorted: rel.sorted,
            })
        }
        Plan::Join { left, right, on } => {
            let l = execute_relation(left, db)?;
            let r = execute_relation(right, db)?;
            let li = resolve_column(&l.columns, &on.left).map_err(|e| exec_error(plan, e))?;
            let ri = resolve_column(&r.columns, &on.right).map_err(|e| exec_error(plan, e))?;
            let (lt, rt) = (l.columns[li].datatype, r.columns[ri].datatype);
            let mut table: HashMap<JoinKey, Vec<&Row>> = HashMap::new();
            for row in &r.rows {
                if let Some(v) = &row.values[ri] {
                    table.entry(join_key(v, rt, lt)).or_default().push(row);
                }
            }
            let mut rows = Vec::new();
            for lrow in &l.rows {
                let Some(v) = &lrow.values[li] else { continue };
                for rrow in table.get(&join_key(v, lt, rt)).into_iter().flatten() {
                    let mut values = lrow.values.clone();
                    values.extend(rrow.values.iter().cloned());
                    let mut provenance = lrow.provenance.clone();
                    provenance.extend(rrow.provenance.iter().cloned());
                    rows.push(Row { values, provenance });
                }
            }
            Ok(Relation {
                columns,
                rows,
                sorted: false,
            }
            .canonical())
        }
        Plan::Aggregate {
            input,
            group_by,
            aggregates,
        } => {
            let rel = execute_relation(input, db)?;
            let keys: Vec<usize> = group_by
                .iter()
                .map(|g| resolve_column(&rel.columns, g).map_err(|e| exec_error(plan, e)))
                .collect::<Result<_, _>>()?;
            let targets: Vec<Option<usize>> = aggregates
                .iter()
                .map(|a| {
                    a.column
                        .as_ref()
                        .map(|c| resolve_column(&rel.columns, c).map_err(|e| exec_error(plan, e)))
                        .transpose()
                })
                .collect::<Result<_, _>>()?;
            let mut groups: BTreeMap<Vec<Cell>, Vec<&Row>> = BTreeMap::new();
            for row in &rel.rows {
                groups.entry(keys.iter().map(|&k| row.values[k].clone()).collect()).or_default().push(row);
            }
            if keys.is_empty() && groups.is_empty() {
                groups.insert(Vec::new(), Vec::new());
            }
            let mut rows = Vec::new();
            for (key, members) in groups {
                let mut values = key;
                for (i, (agg, target)) in aggregates.iter().zip(&targets).enumerate() {
                    let cells: Vec<&Cell> = match target {
                        Some(t) => members.iter().map(|r| &r.values[*t]).collect(),
                        None => Vec::new(),
                    };
                    let datatype = columns[keys.len() + i].datatype;
                    values.push(aggregate_value(plan, agg, datatype, &cells, members.len())?);
                }
                let provenance = members.iter().flat_map(|r| r.provenance.iter().cloned()).collect();
                rows.push(Row { values, provenance });
            }
            Ok(Relation {
                columns,
                rows,
                sorted: false,
            }
            .canonical())
        }
        Plan::Project { input, columns: refs } => {
            let rel = execute_relation(input, db)?;
            let idx: Vec<usize> = refs
                .iter()
                .map(|c| resolve_column(&rel.columns, c).map_err(|e| exec_error(plan, e)))
                .collect::<Result<_, _>>()?;
            let rows = rel
                .rows
                .into_iter()
                .map(|r| Row {
                    values: idx.iter().map(|&i| r.values[i].clone()).collect(),
                    provenance: r.provenance,
                })
                .collect();
            let out = Relation {
                columns,
                rows,
                sorted: rel.sorted,
            };
            Ok(if out.sorted { out } else { out.canonical() })
        }
        Plan::Sort { input, keys } => {
            let mut rel = execute_relation(input, db)?;
            let idx: Vec<(usize, bool)> = keys
                .iter()
                .map(|k| {
                    resolve_column(&rel.columns, &k.column)
                        .map(|i| (i, k.descending))
                        .map_err(|e| exec_error(plan, e))
                })
                .collect::<Result<_, _>>()?;
            rel.rows.sort_by(|a, b| {
                idx.iter()
                    .map(|&(i, desc)| {
                        let o = a.values[i].cmp(&b.values[i]);
                        if desc {
                            o.reverse()
                        } else {
                            o
                        }
                    })
                    .find(|o| o.is_ne())
                    .unwrap_or_else(|| a.cmp(b))
            });
            Ok(Relation {
                columns,
                rows: rel.rows,
                sorted: true,
            })
        }
        Plan::Limit { input, n } => {
            let mut rel = execute_relation(input, db)?;
            rel.rows.truncate(*n);
            Ok(rel)
        }
    }
}

/// Executes `plan` and checks that every cited tuple exists in `db`.
pub fn execute_plan(plan: &Plan, db: &RelationalStore) -> Result<ResultSet, RelationalError> {
    let rel = execute_relation(plan, db)?;
    for row in &rel.rows {
        for p in &row.provenance {
            if db.tuple(&p.tuple_id).is_none() {
                return Err(RelationalError::Provenance(format!("cited tuple {} is not committed", p.tuple_id)));
            }
        }
    }
    Ok(ResultSet::from_relation(rel))
}

impl ResultSet {
    pub fn from_relation(rel: Relation) -> Self {
        let labels: Vec<String> = rel
            .columns
            .iter()
            .map(|c| {
                if rel.columns.iter().filter(|o| o.name == c.name).count() > 1 {
                    c.label()
                } else {
                    c.name.clone()
                }
            })
            .collect();
        let mut rows = Vec::with_capacity(rel.rows.len());
        let mut provenance = ProvenanceChain::default();
        for r in rel.rows {
            rows.push(r.values);
            provenance.rows.push(r.provenance);
        }
        ResultSet {
            columns: labels,
            types: rel.columns.iter().map(|c| c.datatype).collect(),
            rows,
            provenance,
        }
    }
}
