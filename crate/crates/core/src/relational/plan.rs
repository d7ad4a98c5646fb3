//! Plan IR for relational answering and its bottom-up validation.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::RelationalError;
use crate::model::{DataType, Schema, Value};

/// A column reference, written `Table.attr` or bare `attr`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ColumnRef {
    pub table: Option<String>,
    pub name: String,
}

impl ColumnRef {
    pub fn new(table: Option<&str>, name: &str) -> Self {
        Self {
            table: table.map(str::to_string),
            name: name.to_string(),
        }
    }

    pub fn qualified(table: &str, name: &str) -> Self {
        Self::new(Some(table), name)
    }

    pub fn bare(name: &str) -> Self {
        Self::new(None, name)
    }
}

impl TryFrom<String> for ColumnRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let s = s.trim();
        let (table, name) = match s.split_once('.') {
            Some((t, n)) => (Some(t.trim()), n.trim()),
            None => (None, s),
        };
        if name.is_empty() || table.is_some_and(str::is_empty) {
            return Err(format!("bad column reference {s:?}"));
        }
        Ok(ColumnRef::new(table, name))
    }
}

impl From<ColumnRef> for String {
    fn from(c: ColumnRef) -> String {
        c.to_string()
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.table {
            Some(t) => write!(f, "{t}.{}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

/// A typed output column of a plan node. Aggregate outputs carry no table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub table: Option<String>,
    pub name: String,
    pub datatype: DataType,
}

impl Column {
    pub fn matches(&self, r: &ColumnRef) -> bool {
        self.name == r.name && (r.table.is_none() || r.table == self.table)
    }

    pub fn as_ref(&self) -> ColumnRef {
        ColumnRef {
            table: self.table.clone(),
            name: self.name.clone(),
        }
    }

    pub fn label(&self) -> String {
        self.as_ref().to_string()
    }
}

/// Position of `r` among `columns`, rejecting missing and ambiguous names.
pub fn resolve_column(columns: &[Column], r: &ColumnRef) -> Result<usize, String> {
    let hits: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.matches(r))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        [] => Err(format!("unknown column {r}")),
        _ => Err(format!("ambiguous column {r}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "<>", alias = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Bool(b) => Value::Boolean(*b),
            Literal::Int(i) => Value::Integer(*i),
            Literal::Real(r) => Value::Real(*r),
            Literal::Text(s) => Value::Text(s.clone()),
        }
    }
}

impl Eq for Literal {}

impl std::hash::Hash for Literal {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_value().hash(state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Column { column: ColumnRef },
    Literal { value: Literal },
}

impl Operand {
    pub fn col(r: ColumnRef) -> Self {
        Operand::Column { column: r }
    }

    pub fn lit(l: Literal) -> Self {
        Operand::Literal { value: l }
    }
}

/// Boolean predicate under three-valued logic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Compare { left: Operand, cmp: CmpOp, right: Operand },
    IsNull { column: ColumnRef, #[serde(default)] negated: bool },
    And { args: Vec<Predicate> },
    Or { args: Vec<Predicate> },
    Not { arg: Box<Predicate> },
}

impl Predicate {
    pub fn columns(&self) -> Vec<&ColumnRef> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a ColumnRef>) {
        match self {
            Predicate::Compare { left, right, .. } => {
                for o in [left, right] {
                    if let Operand::Column { column } = o {
                        out.push(column);
                    }
                }
            }
            Predicate::IsNull { column, .. } => out.push(column),
            Predicate::And { args } | Predicate::Or { args } => args.iter().for_each(|a| a.collect_columns(out)),
            Predicate::Not { arg } => arg.collect_columns(out),
        }
    }

    /// Top-level conjuncts.
    pub fn conjuncts(self) -> Vec<Predicate> {
        match self {
            Predicate::And { args } => args.into_iter().flat_map(Predicate::conjuncts).collect(),
            p => vec![p],
        }
    }

    pub fn all(mut preds: Vec<Predicate>) -> Option<Predicate> {
        match preds.len() {
            0 => None,
            1 => preds.pop(),
            _ => Some(Predicate::And { args: preds }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFunc {
    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Avg => "avg",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggExpr {
    pub func: AggFunc,
    /// `None` is `count(*)`.
    #[serde(default)]
    pub column: Option<ColumnRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl AggExpr {
    pub fn new(func: AggFunc, column: Option<ColumnRef>) -> Self {
        Self {
            func,
            column,
            alias: None,
        }
    }

    pub fn default_alias(&self) -> String {
        match &self.column {
            None => self.func.name().to_string(),
            Some(c) => format!("{}_{}", self.func.name(), c.name),
        }
    }

    pub fn output_name(&self) -> String {
        self.alias.clone().unwrap_or_else(|| self.default_alias())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SortKey {
    pub column: ColumnRef,
    #[serde(default)]
    pub descending: bool,
}

/// Equality join between one column of each side.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JoinOn {
    pub left: ColumnRef,
    pub right: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Plan {
    Scan {
        table: String,
    },
    Filter {
        input: Box<Plan>,
        predicate: Predicate,
    },
    Join {
        left: Box<Plan>,
        right: Box<Plan>,
        on: JoinOn,
    },
    Aggregate {
        input: Box<Plan>,
        #[serde(default)]
        group_by: Vec<ColumnRef>,
        aggregates: Vec<AggExpr>,
    },
    Project {
        input: Box<Plan>,
        columns: Vec<ColumnRef>,
    },
    Sort {
        input: Box<Plan>,
        keys: Vec<SortKey>,
    },
    Limit {
        input: Box<Plan>,
        n: usize,
    },
}

impl Plan {
    pub fn scan(table: &str) -> Plan {
        Plan::Scan { table: table.into() }
    }

    pub fn filter(self, predicate: Predicate) -> Plan {
        Plan::Filter {
            input: Box::new(self),
            predicate,
        }
    }

    pub fn join(self, right: Plan, left_col: ColumnRef, right_col: ColumnRef) -> Plan {
        Plan::Join {
            left: Box::new(self),
            right: Box::new(right),
            on: JoinOn {
                left: left_col,
                right: right_col,
            },
        }
    }

    pub fn aggregate(self, group_by: Vec<ColumnRef>, aggregates: Vec<AggExpr>) -> Plan {
        Plan::Aggregate {
            input: Box::new(self),
            group_by,
            aggregates,
        }
    }

    pub fn project(self, columns: Vec<ColumnRef>) -> Plan {
        Plan::Project {
            input: Box::new(self),
            columns,
        }
    }

    pub fn sort(self, keys: Vec<SortKey>) -> Plan {
        Plan::Sort {
            input: Box::new(self),
            keys,
        }
    }

    pub fn limit(self, n: usize) -> Plan {
        Plan::Limit {
            input: Box::new(self),
            n,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Plan::Scan { .. } => "scan",
            Plan::Filter { .. } => "filter",
            Plan::Join { .. } => "join",
            Plan::Aggregate { .. } => "aggregate",
            Plan::Project { .. } => "project",
            Plan::Sort { .. } => "sort",
            Plan::Limit { .. } => "limit",
        }
    }

    pub fn children(&self) -> Vec<&Plan> {
        match self {
            Plan::Scan { .. } => vec![],
            Plan::Join { left, right, .. } => vec![left, right],
            Plan::Filter { input, .. }
            | Plan::Aggregate { input, .. }
            | Plan::Project { input, .. }
            | Plan::Sort { input, .. }
            | Plan::Limit { input, .. } => vec![input],
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    pub fn tables(&self) -> Vec<&str> {
        match self {
            Plan::Scan { table } => vec![table.as_str()],
            _ => self.children().into_iter().flat_map(Plan::tables).collect(),
        }
    }

    pub fn contains_sort(&self) -> bool {
        matches!(self, Plan::Sort { .. }) || self.children().iter().any(|c| c.contains_sort())
    }

    /// Output columns after checking every node bottom-up.
    pub fn output(&self, schema: &Schema) -> Result<Vec<Column>, RelationalError> {
        let invalid = |msg: String| RelationalError::InvalidPlan {
            node: self.kind(),
            message: msg,
        };
        match self {
            Plan::Scan { table } => {
                let t = schema
                    .table(table)
                    .ok_or_else(|| invalid(format!("unknown table {table}")))?;
                Ok(t.attributes
                    .iter()
                    .map(|a| Column {
                        table: Some(t.name.clone()),
                        name: a.name.clone(),
                        datatype: a.datatype,
                    })
                    .collect())
            }
            Plan::Filter { input, predicate } => {
                let cols = input.output(schema)?;
                check_predicate(&cols, predicate).map_err(invalid)?;
                Ok(cols)
            }
            Plan::Join { left, right, on } => {
                let l = left.output(schema)?;
                let r = right.output(schema)?;
                let li = resolve_column(&l, &on.left).map_err(|e| invalid(format!("left side: {e}")))?;
                let ri = resolve_column(&r, &on.right).map_err(|e| invalid(format!("right side: {e}")))?;
                if !l[li].datatype.compatible_with(r[ri].datatype) {
                    return Err(invalid(format!(
                        "{} is {} but {} is {}",
                        on.left, l[li].datatype, on.right, r[ri].datatype
                    )));
                }
                let mut out = l;
                for c in r {
                    if out.iter().any(|o| o.table == c.table && o.name == c.name) {
                        return Err(invalid(format!("column {} appears on both sides", c.label())));
                    }
                    out.push(c);
                }
                Ok(out)
            }
            Plan::Aggregate {
                input,
                group_by,
                aggregates,
            } => {
                let cols = input.output(schema)?;
                let mut out = Vec::new();
                for g in group_by {
                    let i = resolve_column(&cols, g).map_err(invalid)?;
                    if out.iter().any(|c: &Column| c.table == cols[i].table && c.name == cols[i].name) {
                        return Err(invalid(format!("column {g} grouped twice")));
                    }
                    out.push(cols[i].clone());
                }
                for a in aggregates {
                    let datatype = match (&a.column, a.func) {
                        (None, AggFunc::Count) => DataType::Integer,
                        (None, f) => return Err(invalid(format!("{}(*) is not supported", f.name()))),
                        (Some(c), f) => {
                            let t = cols[resolve_column(&cols, c).map_err(invalid)?].datatype;
                            match f {
                                AggFunc::Count => DataType::Integer,
                                AggFunc::Sum | AggFunc::Avg if !t.is_numeric() => {
                                    return Err(invalid(format!("{}({c}) over {t}", f.name())))
                                }
                                AggFunc::Sum => t,
                                AggFunc::Avg => DataType::Real,
                                AggFunc::Min | AggFunc::Max => t,
                            }
                        }
                    };
                    let name = a.output_name();
                    if out.iter().any(|c| c.table.is_none() && c.name == name) {
                        return Err(invalid(format!("duplicate aggregate name {name}")));
                    }
                    out.push(Column {
                        table: None,
                        name,
                        datatype,
                    });
                }
                if out.is_empty() {
                    return Err(invalid("aggregate with no outputs".into()));
                }
                Ok(out)
            }
            Plan::Project { input, columns } => {
                let cols = input.output(schema)?;
                if columns.is_empty() {
                    return Err(invalid("empty projection".into()));
                }
                let mut out: Vec<Column> = Vec::new();
                for c in columns {
                    let col = cols[resolve_column(&cols, c).map_err(invalid)?].clone();
                    if out.iter().any(|o| o.table == col.table && o.name == col.name) {
                        return Err(invalid(format!("column {c} projected twice")));
                    }
                    out.push(col);
                }
                Ok(out)
            }
            Plan::Sort { input, keys } => {
                let cols = input.output(schema)?;
                if keys.is_empty() {
                    return Err(invalid("sort without keys".into()));
                }
                for k in keys {
                    resolve_column(&cols, &k.column).map_err(invalid)?;
                }
                Ok(cols)
            }
            Plan::Limit { input, .. } => input.output(schema),
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), RelationalError> {
        self.output(schema).map(|_| ())
    }
}

fn check_predicate(cols: &[Column], p: &Predicate) -> Result<(), String> {
    match p {
        Predicate::Compare { left, right, .. } => {
            let ty = |o: &Operand| -> Result<DataType, String> {
                Ok(match o {
                    Operand::Column { column } => cols[resolve_column(cols, column)?].datatype,
                    Operand::Literal { value } => value.to_value().datatype(),
                })
            };
            let (l, r) = (ty(left)?, ty(right)?);
            if !comparable(l, r) {
                return Err(format!("cannot compare {l} with {r}"));
            }
            Ok(())
        }
        Predicate::IsNull { column, .. } => resolve_column(cols, column).map(|_| ()),
        Predicate::And { args } | Predicate::Or { args } => {
            if args.is_empty() {
                return Err("empty boolean connective".into());
            }
            args.iter().try_for_each(|a| check_predicate(cols, a))
        }
        Predicate::Not { arg } => check_predicate(cols, arg),
    }
}

/// Whether values of the two types may be compared. Text literals are
/// accepted against identifiers and temporal columns.
pub fn comparable(a: DataType, b: DataType) -> bool {
    use DataType::*;
    a.compatible_with(b)
        || matches!(
            (a, b),
            (Text, Identifier | Date | Datetime) | (Identifier | Date | Datetime, Text)
        )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttributeDef, TableDef};

    fn schema() -> Schema {
        Schema::new(
            vec![
                TableDef::new(
                    "Company",
                    vec![
                        AttributeDef::new("name", DataType::Text),
                        AttributeDef::new("ticker", DataType::Identifier),
                        AttributeDef::new("founding_year", DataType::Integer),
                    ],
                ),
                TableDef::new(
                    "Person",
                    vec![
                        AttributeDef::new("name", DataType::Text),
                        AttributeDef::new("ticker", DataType::Identifier),
                    ],
                ),
            ],
            vec![],
        )
    }

    fn gt(col: &str, n: i64) -> Predicate {
        Predicate::Compare {
            left: Operand::col(ColumnRef::try_from(col.to_string()).unwrap()),
            cmp: CmpOp::Gt,
            right: Operand::lit(Literal::Int(n)),
        }
    }

    #[test]
    fn count_after_filter_validates() {
        let p = Plan::scan("Company")
            .filter(gt("founding_year", 2000))
            .aggregate(vec![], vec![AggExpr::new(AggFunc::Count, None)]);
        let out = p.output(&schema()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].name, "count");
        assert_eq!(out[0].datatype, DataType::Integer);
    }

    #[test]
    fn ambiguous_after_join() {
        let j = Plan::scan("Company").join(
            Plan::scan("Person"),
            ColumnRef::qualified("Company", "ticker"),
            ColumnRef::qualified("Person", "ticker"),
        );
        let err = j.clone().project(vec![ColumnRef::bare("name")]).validate(&schema()).unwrap_err();
        assert!(err.to_string().contains("ambiguous"));
        j.project(vec![ColumnRef::qualified("Person", "name")]).validate(&schema()).unwrap();
    }

    #[test]
    fn rejects_bad_references_and_types() {
        let s = schema();
        assert!(Plan::scan("Nope").validate(&s).is_err());
        assert!(Plan::scan("Company").filter(gt("age", 1)).validate(&s).is_err());
        let text_vs_int = Predicate::Compare {
            left: Operand::col(ColumnRef::bare("founding_year")),
            cmp: CmpOp::Eq,
            right: Operand::lit(Literal::Text("x".into())),
        };
        assert!(Plan::scan("Company").filter(text_vs_int).validate(&s).is_err());
        let sum_text = Plan::scan("Company").aggregate(vec![], vec![AggExpr::new(AggFunc::Sum, Some(ColumnRef::bare("name")))]);
        assert!(sum_text.validate(&s).is_err());
        let bad_join = Plan::scan("Company").join(Plan::scan("Person"), ColumnRef::bare("founding_year"), ColumnRef::bare("ticker"));
        assert!(bad_join.validate(&s).is_err());
        let self_join = Plan::scan("Person").join(Plan::scan("Person"), ColumnRef::bare("ticker"), ColumnRef::bare("ticker"));
        assert!(self_join.validate(&s).is_err());
    }

    #[test]
    fn plan_json_shape() {
        let p = Plan::scan("Company")
            .filter(gt("Company.founding_year", 2000))
            .aggregate(vec![], vec![AggExpr::new(AggFunc::Count, None)]);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["node"], "aggregate");
        assert_eq!(v["input"]["predicate"]["left"]["column"], "Company.founding_year");
        assert_eq!(v["input"]["predicate"]["cmp"], ">");
        let back: Plan = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
