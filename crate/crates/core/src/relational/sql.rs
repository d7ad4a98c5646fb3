//! SQL rendering of plans and the parser for the same dialect.
//!
//! The dialect is a single SELECT with optional JOIN ... ON, WHERE, GROUP
//! BY, ORDER BY and LIMIT clauses; derived tables in FROM take no alias.
//! Within one block the clauses apply in the order FROM, WHERE, GROUP BY,
//! ORDER BY, select list, LIMIT. The grammar is in `grammar/query.ebnf`.

use super::plan::{AggExpr, AggFunc, CmpOp, ColumnRef, JoinOn, Literal, Operand, Plan, Predicate, SortKey};
use super::RelationalError;

pub const GRAMMAR: &str = include_str!("../../grammar/query.ebnf");

#[derive(Debug, Clone)]
enum FromItem {
    Table(String),
    Sub(Box<Block>),
}

#[derive(Debug, Clone)]
struct Block {
    from: Vec<FromItem>,
    joins: Vec<JoinOn>,
    filters: Vec<Predicate>,
    aggregate: Option<(Vec<ColumnRef>, Vec<AggExpr>)>,
    order: Option<Vec<SortKey>>,
    select: Option<Vec<ColumnRef>>,
    limit: Option<usize>,
    stage: u8,
}

const FROM: u8 = 0;
const WHERE: u8 = 1;
const GROUP: u8 = 2;
const ORDER: u8 = 3;
const SELECT: u8 = 4;
const LIMIT: u8 = 5;

impl Block {
    fn over(item: FromItem) -> Self {
        Block {
            from: vec![item],
            joins: Vec::new(),
            filters: Vec::new(),
            aggregate: None,
            order: None,
            select: None,
            limit: None,
            stage: FROM,
        }
    }

    fn wrap(self) -> Self {
        Block::over(FromItem::Sub(Box::new(self)))
    }

    /// The block itself when clauses up to `stage` are still free.
    fn open(self, stage: u8) -> Self {
        if self.stage <= stage {
            self
        } else {
            self.wrap()
        }
    }
}

fn to_block(plan: &Plan) -> Block {
    match plan {
        Plan::Scan { table } => Block::over(FromItem::Table(table.clone())),
        Plan::Filter { input, predicate } => {
            let mut b = to_block(input).open(WHERE);
            b.filters.push(predicate.clone());
            b.stage = WHERE;
            b
        }
        Plan::Join { left, right, on } => {
            let mut l = to_block(left).open(FROM);
            let r = to_block(right);
            let item = if r.stage == FROM && r.from.len() == 1 {
                r.from.into_iter().next().expect("one item")
            } else {
                FromItem::Sub(Box::new(r))
            };
            l.from.push(item);
            l.joins.push(on.clone());
            l
        }
        Plan::Aggregate {
            input,
            group_by,
            aggregates,
        } => {
            let mut b = to_block(input).open(WHERE);
            b.aggregate = Some((group_by.clone(), aggregates.clone()));
            b.stage = GROUP;
            b
        }
        Plan::Sort { input, keys } => {
            let mut b = to_block(input).open(GROUP);
            b.order = Some(keys.clone());
            b.stage = ORDER;
            b
        }
        Plan::Project { input, columns } => {
            let b = to_block(input);
            let mut b = if b.aggregate.is_some() { b.wrap() } else { b.open(ORDER) };
            b.select = Some(columns.clone());
            b.stage = SELECT;
            b
        }
        Plan::Limit { input, n } => {
            let mut b = to_block(input).open(SELECT);
            b.limit = Some(*n);
            b.stage = LIMIT;
            b
        }
    }
}

pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn render_column(c: &ColumnRef) -> String {
    match &c.table {
        Some(t) => format!("{}.{}", quote_ident(t), quote_ident(&c.name)),
        None => quote_ident(&c.name),
    }
}

fn render_literal(l: &Literal) -> String {
    match l {
        Literal::Bool(true) => "TRUE".into(),
        Literal::Bool(false) => "FALSE".into(),
        Literal::Int(i) => i.to_string(),
        Literal::Real(r) => format!("{r:?}"),
        Literal::Text(s) => format!("'{}'", s.replace('\'', "''")),
    }
}

fn render_operand(o: &Operand) -> String {
    match o {
        Operand::Column { column } => render_column(column),
        Operand::Literal { value } => render_literal(value),
    }
}

pub fn render_predicate(p: &Predicate) -> String {
    match p {
        Predicate::Compare { left, cmp, right } => {
            format!("{} {} {}", render_operand(left), cmp.symbol(), render_operand(right))
        }
        Predicate::IsNull { column, negated } => {
            format!("{} IS {}NULL", render_column(column), if *negated { "NOT " } else { "" })
        }
        Predicate::And { args } => format!("({})", args.iter().map(render_predicate).collect::<Vec<_>>().join(" AND ")),
        Predicate::Or { args } => format!("({})", args.iter().map(render_predicate).collect::<Vec<_>>().join(" OR ")),
        Predicate::Not { arg } => format!("NOT ({})", render_predicate(arg)),
    }
}

fn render_aggregate(a: &AggExpr) -> String {
    let arg = a.column.as_ref().map_or("*".to_string(), render_column);
    let call = format!("{}({arg})", a.func.name().to_uppercase());
    match &a.alias {
        Some(alias) if *alias != a.default_alias() => format!("{call} AS {}", quote_ident(alias)),
        _ => call,
    }
}

fn render_from(item: &FromItem) -> String {
    match item {
        FromItem::Table(t) => quote_ident(t),
        FromItem::Sub(b) => format!("({})", render_block(b)),
    }
}

fn render_block(b: &Block) -> String {
    let list = match (&b.select, &b.aggregate) {
        (Some(cols), _) => cols.iter().map(render_column).collect::<Vec<_>>().join(", "),
        (None, Some((group, aggs))) => group
            .iter()
            .map(render_column)
            .chain(aggs.iter().map(render_aggregate))
            .collect::<Vec<_>>()
            .join(", "),
        (None, None) => "*".into(),
    };
    let mut sql = format!("SELECT {list} FROM {}", render_from(&b.from[0]));
    for (item, on) in b.from[1..].iter().zip(&b.joins) {
        sql.push_str(&format!(
            " JOIN {} ON {} = {}",
            render_from(item),
            render_column(&on.left),
            render_column(&on.right)
        ));
    }
    if !b.filters.is_empty() {
        let parts: Vec<String> = b.filters.iter().map(render_predicate).collect();
        sql.push_str(&format!(" WHERE {}", parts.join(" AND ")));
    }
    if let Some((group, _)) = &b.aggregate {
        if !group.is_empty() {
            let cols: Vec<String> = group.iter().map(render_column).collect();
            sql.push_str(&format!(" GROUP BY {}", cols.join(", ")));
        }
    }
    if let Some(keys) = &b.order {
        let parts: Vec<String> = keys
            .iter()
            .map(|k| format!("{} {}", render_column(&k.column), if k.descending { "DESC" } else { "ASC" }))
            .collect();
        sql.push_str(&format!(" ORDER BY {}", parts.join(", ")));
    }
    if let Some(n) = b.limit {
        sql.push_str(&format!(" LIMIT {n}"));
    }
    sql
}

/// Renders `plan` as one SELECT statement.
pub fn emit_sql(plan: &Plan) -> String {
    render_block(&to_block(plan))
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Quoted(String),
    Str(String),
    Number(String),
    Sym(&'static str),
}

fn tokenize(sql: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '"' || c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(format!("unterminated {c}")),
                    Some(&d) if d == c => {
                        if chars.get(i + 1) == Some(&c) {
                            s.push(c);
                            i += 2;
                        } else {
                            i += 1;
                            break;
                        }
                    }
                    Some(&d) => {
                        s.push(d);
                        i += 1;
                    }
                }
            }
            out.push(if c == '"' { Token::Quoted(s) } else { Token::Str(s) });
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(Token::Number(chars[start..i].iter().collect()));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Word(chars[start..i].iter().collect()));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "<>" => Some("<>"),
                "!=" => Some("<>"),
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push(Token::Sym(s));
                i += 2;
                continue;
            }
            let s = match c {
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '.' => ".",
                '*' => "*",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                ';' => ";",
                other => return Err(format!("unexpected character {other:?}")),
            };
            out.push(Token::Sym(s));
            i += 1;
        }
    }
    Ok(out)
}

const RESERVED: [&str; 20] = [
    "SELECT", "FROM", "JOIN", "INNER", "ON", "WHERE", "GROUP", "BY", "ORDER", "LIMIT", "AND", "OR", "NOT", "IS",
    "NULL", "AS", "ASC", "DESC", "TRUE", "FALSE",
];

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

enum SelectItem {
    Column(ColumnRef),
    Aggregate(AggExpr),
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn at_keyword_ahead(&self, offset: usize, kw: &str) -> bool {
        matches!(self.tokens.get(self.pos + offset), Some(Token::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), String> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(format!("expected {kw} at token {}", self.pos))
        }
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Token::Sym(x)) if *x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.at_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), String> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(format!("expected {s:?} at token {}", self.pos))
        }
    }

    fn ident(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Token::Quoted(s)) => Ok(s),
            Some(Token::Word(w)) if !RESERVED.iter().any(|r| w.eq_ignore_ascii_case(r)) => Ok(w),
            other => Err(format!("expected identifier, found {other:?}")),
        }
    }

    fn column(&mut self) -> Result<ColumnRef, String> {
        let first = self.ident()?;
        if self.eat_sym(".") {
            let name = self.ident()?;
            Ok(ColumnRef::qualified(&first, &name))
        } else {
            Ok(ColumnRef::bare(&first))
        }
    }

    fn number(text: &str) -> Result<Literal, String> {
        if text.contains(['.', 'e', 'E']) {
            text.parse::<f64>()
                .map(Literal::Real)
                .map_err(|_| format!("bad number {text}"))
        } else {
            text.parse::<i64>()
                .map(Literal::Int)
                .map_err(|_| format!("bad number {text}"))
        }
    }

    fn operand(&mut self) -> Result<Operand, String> {
        match self.peek().cloned() {
            Some(Token::Str(s)) => {
                self.pos += 1;
                Ok(Operand::lit(Literal::Text(s)))
            }
            Some(Token::Number(n)) => {
                self.pos += 1;
                Ok(Operand::lit(Self::number(&n)?))
            }
            Some(Token::Word(w)) if w.eq_ignore_ascii_case("TRUE") => {
                self.pos += 1;
                Ok(Operand::lit(Literal::Bool(true)))
            }
            Some(Token::Word(w)) if w.eq_ignore_ascii_case("FALSE") => {
                self.pos += 1;
                Ok(Operand::lit(Literal::Bool(false)))
            }
            _ => Ok(Operand::col(self.column()?)),
        }
    }

    fn comparison(&mut self) -> Result<CmpOp, String> {
        let op = match self.next() {
            Some(Token::Sym("=")) => CmpOp::Eq,
            Some(Token::Sym("<>")) => CmpOp::Ne,
            Some(Token::Sym("<")) => CmpOp::Lt,
            Some(Token::Sym("<=")) => CmpOp::Le,
            Some(Token::Sym(">")) => CmpOp::Gt,
            Some(Token::Sym(">=")) => CmpOp::Ge,
            other => return Err(format!("expected comparison, found {other:?}")),
        };
        Ok(op)
    }

    fn predicate(&mut self) -> Result<Predicate, String> {
        let first = self.conjunction()?;
        let mut args = vec![first];
        while self.eat_keyword("OR") {
            args.push(self.conjunction()?);
        }
        Ok(if args.len() == 1 {
            args.pop().expect("one")
        } else {
            Predicate::Or { args }
        })
    }

    fn conjunction(&mut self) -> Result<Predicate, String> {
        let first = self.negation()?;
        let mut args = vec![first];
        while self.eat_keyword("AND") {
            args.push(self.negation()?);
        }
        Ok(if args.len() == 1 {
            args.pop().expect("one")
        } else {
            Predicate::And { args }
        })
    }

    fn negation(&mut self) -> Result<Predicate, String> {
        if self.eat_keyword("NOT") {
            return Ok(Predicate::Not {
                arg: Box::new(self.negation()?),
            });
        }
        if self.eat_sym("(") {
            let p = self.predicate()?;
            self.expect_sym(")")?;
            return Ok(p);
        }
        let left = self.operand()?;
        if self.eat_keyword("IS") {
            let negated = self.eat_keyword("NOT");
            self.expect_keyword("NULL")?;
            let Operand::Column { column } = left else {
                return Err("IS NULL needs a column".into());
            };
            return Ok(Predicate::IsNull { column, negated });
        }
        let cmp = self.comparison()?;
        let right = self.operand()?;
        Ok(Predicate::Compare { left, cmp, right })
    }

    fn select_item(&mut self) -> Result<SelectItem, String> {
        let func = match self.peek() {
            Some(Token::Word(w)) if matches!(self.tokens.get(self.pos + 1), Some(Token::Sym("("))) => {
                match w.to_ascii_lowercase().as_str() {
                    "count" => Some(AggFunc::Count),
                    "sum" => Some(AggFunc::Sum),
                    "avg" => Some(AggFunc::Avg),
                    "min" => Some(AggFunc::Min),
                    "max" => Some(AggFunc::Max),
                    other => return Err(format!("unknown function {other}")),
                }
            }
            _ => None,
        };
        let Some(func) = func else {
            return Ok(SelectItem::Column(self.column()?));
        };
        self.pos += 2;
        let column = if self.eat_sym("*") { None } else { Some(self.column()?) };
        self.expect_sym(")")?;
        let alias = if self.eat_keyword("AS") { Some(self.ident()?) } else { None };
        Ok(SelectItem::Aggregate(AggExpr { func, column, alias }))
    }

    fn from_item(&mut self) -> Result<Plan, String> {
        if self.eat_sym("(") {
            let p = self.select()?;
            self.expect_sym(")")?;
            Ok(p)
        } else {
            Ok(Plan::scan(&self.ident()?))
        }
    }

    fn select(&mut self) -> Result<Plan, String> {
        self.expect_keyword("SELECT")?;
        let items = if self.eat_sym("*") {
            None
        } else {
            let mut items = vec![self.select_item()?];
            while self.eat_sym(",") {
                items.push(self.select_item()?);
            }
            Some(items)
        };
        self.expect_keyword("FROM")?;
        let mut plan = self.from_item()?;
        loop {
            if self.at_keyword("INNER") && self.at_keyword_ahead(1, "JOIN") {
                self.pos += 1;
            }
            if !self.eat_keyword("JOIN") {
                break;
            }
            let right = self.from_item()?;
            self.expect_keyword("ON")?;
            let l = self.column()?;
            self.expect_sym("=")?;
            let r = self.column()?;
            plan = plan.join(right, l, r);
        }
        if self.eat_keyword("WHERE") {
            plan = plan.filter(self.predicate()?);
        }
        let mut group_by = Vec::new();
        let grouped = self.at_keyword("GROUP");
        if grouped {
            self.pos += 1;
            self.expect_keyword("BY")?;
            group_by.push(self.column()?);
            while self.eat_sym(",") {
                group_by.push(self.column()?);
            }
        }
        let mut order = None;
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            let mut keys = Vec::new();
            loop {
                let column = self.column()?;
                let descending = if self.eat_keyword("DESC") {
                    true
                } else {
                    self.eat_keyword("ASC");
                    false
                };
                keys.push(SortKey { column, descending });
                if !self.eat_sym(",") {
                    break;
                }
            }
            order = Some(keys);
        }
        let limit = if self.eat_keyword("LIMIT") {
            match self.next() {
                Some(Token::Number(n)) => Some(n.parse::<usize>().map_err(|_| format!("bad limit {n}"))?),
                other => return Err(format!("expected limit, found {other:?}")),
            }
        } else {
            None
        };

        let aggregates: Vec<AggExpr> = items
            .iter()
            .flatten()
            .filter_map(|i| match i {
                SelectItem::Aggregate(a) => Some(a.clone()),
                SelectItem::Column(_) => None,
            })
            .collect();
        let mut projection: Option<Vec<ColumnRef>> = items.as_ref().map(|items| {
            items
                .iter()
                .map(|i| match i {
                    SelectItem::Column(c) => c.clone(),
                    SelectItem::Aggregate(a) => ColumnRef::bare(&a.output_name()),
                })
                .collect()
        });
        if grouped || !aggregates.is_empty() {
            let natural: Vec<ColumnRef> = group_by
                .iter()
                .cloned()
                .chain(aggregates.iter().map(|a| ColumnRef::bare(&a.output_name())))
                .collect();
            if projection.as_ref() == Some(&natural) {
                projection = None;
            }
            plan = plan.aggregate(group_by, aggregates);
        }
        if let Some(keys) = order {
            plan = plan.sort(keys);
        }
        if let Some(cols) = projection {
            plan = plan.project(cols);
        }
        if let Some(n) = limit {
            plan = plan.limit(n);
        }
        Ok(plan)
    }
}

/// Parses one SELECT statement of the dialect into a plan.
pub fn parse_sql(sql: &str) -> Result<Plan, RelationalError> {
    let tokens = tokenize(sql).map_err(RelationalError::Parse)?;
    let mut p = Parser { tokens, pos: 0 };
    let plan = p.select().map_err(RelationalError::Parse)?;
    p.eat_sym(";");
    if p.pos < p.tokens.len() {
        return Err(RelationalError::Parse(format!("trailing input at token {}", p.pos)));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(col: &str, n: i64) -> Predicate {
        Predicate::Compare {
            left: Operand::col(ColumnRef::bare(col)),
            cmp: CmpOp::Gt,
            right: Operand::lit(Literal::Int(n)),
        }
    }

    #[test]
    fn count_after_filter() {
        let p = Plan::scan("Company")
            .filter(gt("founding_year", 2000))
            .aggregate(vec![], vec![AggExpr::new(AggFunc::Count, None)]);
        let sql = emit_sql(&p);
        assert_eq!(sql, r#"SELECT COUNT(*) FROM "Company" WHERE "founding_year" > 2000"#);
        assert_eq!(parse_sql(&sql).unwrap(), p);
    }

    #[test]
    fn scan_and_project() {
        let p = Plan::scan("Company").project(vec![ColumnRef::bare("name")]);
        assert_eq!(emit_sql(&p), r#"SELECT "name" FROM "Company""#);
        assert_eq!(parse_sql(&emit_sql(&p)).unwrap(), p);
    }

    #[test]
    fn nesting_when_clauses_are_out_of_order() {
        let p = Plan::scan("T")
            .limit(3)
            .filter(gt("x", 1))
            .aggregate(vec![ColumnRef::bare("g")], vec![AggExpr::new(AggFunc::Sum, Some(ColumnRef::bare("x")))])
            .project(vec![ColumnRef::bare("sum_x")]);
        let sql = emit_sql(&p);
        assert_eq!(
            sql,
            r#"SELECT "sum_x" FROM (SELECT "g", SUM("x") FROM (SELECT * FROM "T" LIMIT 3) WHERE "x" > 1 GROUP BY "g")"#
        );
        assert_eq!(parse_sql(&sql).unwrap(), p);
    }

    #[test]
    fn joins_predicates_and_literals() {
        let pred = Predicate::Or {
            args: vec![
                Predicate::Not {
                    arg: Box::new(Predicate::IsNull {
                        column: ColumnRef::qualified("A", "x"),
                        negated: true,
                    }),
                },
                Predicate::Compare {
                    left: Operand::lit(Literal::Text("it's".into())),
                    cmp: CmpOp::Ne,
                    right: Operand::col(ColumnRef::bare("na\"me")),
                },
                Predicate::Compare {
                    left: Operand::col(ColumnRef::bare("r")),
                    cmp: CmpOp::Le,
                    right: Operand::lit(Literal::Real(-2.5e-7)),
                },
                Predicate::Compare {
                    left: Operand::col(ColumnRef::bare("b")),
                    cmp: CmpOp::Eq,
                    right: Operand::lit(Literal::Bool(false)),
                },
            ],
        };
        let p = Plan::scan("A")
            .join(
                Plan::scan("B").filter(gt("y", 0)),
                ColumnRef::qualified("A", "k"),
                ColumnRef::qualified("B", "k"),
            )
            .filter(pred)
            .sort(vec![SortKey {
                column: ColumnRef::bare("x"),
                descending: true,
            }])
            .limit(2);
        let back = parse_sql(&emit_sql(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn hand_written_sql() {
        let p = parse_sql("select name, count(*) as n from Person inner join Company on Person.ticker = Company.ticker group by name order by n desc limit 5;").unwrap();
        assert_eq!(p.kind(), "limit");
        assert!(parse_sql("SELECT * FROM").is_err());
        assert!(parse_sql("SELECT * FROM t garbage").is_err());
        assert!(parse_sql("SELECT median(x) FROM t").is_err());
    }

    #[test]
    fn grammar_is_bundled() {
        assert!(GRAMMAR.contains("select_stmt"));
    }
}
