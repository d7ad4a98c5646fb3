use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The closed set of attribute datatypes a schema may declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Integer,
    Real,
    Date,
    Datetime,
    Boolean,
    Identifier,
}

impl DataType {
    pub const ALL: [DataType; 7] = [
        DataType::Text,
        DataType::Integer,
        DataType::Real,
        DataType::Date,
        DataType::Datetime,
        DataType::Boolean,
        DataType::Identifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Integer => "integer",
            DataType::Real => "real",
            DataType::Date => "date",
            DataType::Datetime => "datetime",
            DataType::Boolean => "boolean",
            DataType::Identifier => "identifier",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::Integer | DataType::Real)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, DataType::Date | DataType::Datetime)
    }

    pub fn is_string_like(self) -> bool {
        matches!(self, DataType::Text | DataType::Identifier)
    }

    /// Whether values of the two types can be compared for equality or order.
    pub fn compatible_with(self, other: DataType) -> bool {
        self == other
            || (self.is_numeric() && other.is_numeric())
            || (self.is_string_like() && other.is_string_like())
            || (self.is_temporal() && other.is_temporal())
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed, normalized attribute value.
///
/// `Eq`/`Hash`/`Ord` are structural (variant first, then payload, reals by
/// `total_cmp`), which makes values usable as grouping keys. Semantic
/// comparisons that coerce across compatible types go through
/// [`Value::compare`].
#[derive(Debug, Clone)]
pub enum Value {
    Text(String),
    Integer(i64),
    Real(f64),
    Date(NaiveDate),
    Datetime(NaiveDateTime),
    Boolean(bool),
    Identifier(String),
}

impl Value {
    pub fn datatype(&self) -> DataType {
        match self {
            Value::Text(_) => DataType::Text,
            Value::Integer(_) => DataType::Integer,
            Value::Real(_) => DataType::Real,
            Value::Date(_) => DataType::Date,
            Value::Datetime(_) => DataType::Datetime,
            Value::Boolean(_) => DataType::Boolean,
            Value::Identifier(_) => DataType::Identifier,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Text(_) => 0,
            Value::Integer(_) => 1,
            Value::Real(_) => 2,
            Value::Date(_) => 3,
            Value::Datetime(_) => 4,
            Value::Boolean(_) => 5,
            Value::Identifier(_) => 6,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }

    fn as_datetime(&self) -> Option<NaiveDateTime> {
        match self {
            Value::Date(d) => Some(d.and_time(NaiveTime::MIN)),
            Value::Datetime(dt) => Some(*dt),
            _ => None,
        }
    }

    /// Semantic comparison with coercion between compatible types.
    ///
    /// Integers and reals compare numerically; a string compared against an
    /// identifier is identifier-normalized first; dates compare with
    /// datetimes at midnight; a string literal compared against a temporal
    /// value is parsed as one. Returns `None` for incomparable pairs.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        use Value::*;
        match (self, other) {
            (Integer(a), Integer(b)) => Some(a.cmp(b)),
            (Integer(_) | Real(_), Integer(_) | Real(_)) => {
                let (a, b) = (self.as_f64()?, other.as_f64()?);
                a.partial_cmp(&b)
            }
            (Text(a), Text(b)) => Some(a.cmp(b)),
            (Identifier(a), Identifier(b)) => Some(a.cmp(b)),
            (Identifier(a), Text(b)) => Some(a.as_str().cmp(normalize_identifier(b).as_str())),
            (Text(a), Identifier(b)) => Some(normalize_identifier(a).as_str().cmp(b.as_str())),
            (Date(a), Date(b)) => Some(a.cmp(b)),
            (Date(_) | Datetime(_), Date(_) | Datetime(_)) => {
                Some(self.as_datetime()?.cmp(&other.as_datetime()?))
            }
            (Date(_) | Datetime(_), Text(s)) => {
                let parsed = parse_temporal_literal(s)?;
                self.as_datetime()?.partial_cmp(&parsed.as_datetime()?)
            }
            (Text(_), Date(_) | Datetime(_)) => other.compare(self).map(Ordering::reverse),
            (Boolean(a), Boolean(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Canonical text used in SQL literals, JSON rows, and answer rendering.
    pub fn render(&self) -> String {
        match self {
            Value::Text(s) | Value::Identifier(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => render_real(*r),
            Value::Date(d) => d.format("%Y-%m-%d").to_string(),
            Value::Datetime(dt) => dt.format("%Y-%m-%dT%H:%M:%S").to_string(),
            Value::Boolean(b) => b.to_string(),
        }
    }

    /// Plain JSON form: strings, numbers and booleans. The datatype is carried
    /// by the schema, see [`Value::from_json`].
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Integer(i) => serde_json::Value::from(*i),
            Value::Real(r) => serde_json::Number::from_f64(*r)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Boolean(b) => serde_json::Value::Bool(*b),
            other => serde_json::Value::String(other.render()),
        }
    }

    /// Reads a plain JSON scalar back into a typed value through
    /// [`normalize_value`].
    pub fn from_json(
        json: &serde_json::Value,
        datatype: DataType,
    ) -> Result<Option<Value>, NormalizeError> {
        match json_scalar_text(json) {
            None => Ok(None),
            Some(raw) => normalize_value(&raw, datatype),
        }
    }
}

/// Renders a JSON scalar the way a model would have written it in text.
/// Arrays and objects are rendered as compact JSON.
pub fn json_scalar_text(json: &serde_json::Value) -> Option<String> {
    match json {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        other => Some(other.to_string()),
    }
}

fn render_real(r: f64) -> String {
    if r.is_finite() && r.fract() == 0.0 && r.abs() < 1e15 {
        format!("{r:.1}")
    } else {
        format!("{r}")
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        use Value::*;
        match (self, other) {
            (Text(a), Text(b)) | (Identifier(a), Identifier(b)) => a.cmp(b),
            (Integer(a), Integer(b)) => a.cmp(b),
            (Real(a), Real(b)) => a.total_cmp(b),
            (Date(a), Date(b)) => a.cmp(b),
            (Datetime(a), Datetime(b)) => a.cmp(b),
            (Boolean(a), Boolean(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Value::Text(s) | Value::Identifier(s) => s.hash(state),
            Value::Integer(i) => i.hash(state),
            Value::Real(r) => r.to_bits().hash(state),
            Value::Date(d) => d.hash(state),
            Value::Datetime(dt) => dt.hash(state),
            Value::Boolean(b) => b.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot parse {raw:?} as {datatype}")]
pub struct NormalizeError {
    pub raw: String,
    pub datatype: DataType,
}

const NULL_SENTINELS: [&str; 3] = ["", "n/a", "unknown"];

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

fn collapse_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-fold, trim and collapse internal whitespace.
pub fn normalize_identifier(raw: &str) -> String {
    collapse_whitespace(&raw.to_lowercase())
}

/// Parses raw extracted text into a typed value.
///
/// Empty strings and the sentinels `N/A` / `unknown` (any case) map to
/// `Ok(None)`. Anything else that does not parse as `datatype` is an error
/// carrying the raw text.
pub fn normalize_value(raw: &str, datatype: DataType) -> Result<Option<Value>, NormalizeError> {
    let trimmed = raw.trim();
    if NULL_SENTINELS.contains(&trimmed.to_lowercase().as_str()) {
        return Ok(None);
    }
    let fail = || NormalizeError {
        raw: raw.to_string(),
        datatype,
    };
    let value = match datatype {
        DataType::Identifier => Value::Identifier(normalize_identifier(trimmed)),
        DataType::Text => Value::Text(collapse_whitespace(trimmed)),
        DataType::Integer => Value::Integer(parse_integer(trimmed).ok_or_else(fail)?),
        DataType::Real => Value::Real(parse_real(trimmed).ok_or_else(fail)?),
        DataType::Date => Value::Date(parse_date(trimmed).ok_or_else(fail)?),
        DataType::Datetime => Value::Datetime(parse_datetime(trimmed).ok_or_else(fail)?),
        DataType::Boolean => Value::Boolean(parse_boolean(trimmed).ok_or_else(fail)?),
    };
    Ok(Some(value))
}

fn strip_separators(raw: &str) -> Option<String> {
    let body = raw.strip_prefix(['+', '-']).unwrap_or(raw);
    if body.starts_with(',') || body.ends_with(',') || body.contains(",,") {
        return None;
    }
    Some(raw.replace(',', ""))
}

fn parse_integer(raw: &str) -> Option<i64> {
    let cleaned = strip_separators(raw)?;
    let cleaned = cleaned.strip_prefix('+').unwrap_or(&cleaned);
    cleaned.parse::<i64>().ok()
}

fn parse_real(raw: &str) -> Option<f64> {
    let cleaned = strip_separators(raw)?;
    let cleaned = cleaned.strip_prefix('+').unwrap_or(&cleaned);
    let has_digit = cleaned.chars().any(|c| c.is_ascii_digit());
    let only_numeric = cleaned
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | 'E' | '+'));
    if !has_digit || !only_numeric {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|r| r.is_finite())
}

/// Accepted forms: `YYYY-MM-DD`, `YYYY/MM/DD`, `Month D, YYYY`, and a bare
/// `YYYY` (read as January 1st).
pub fn parse_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Some(d);
    }
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y/%m/%d") {
        return Some(d);
    }
    if raw.len() == 4 && raw.chars().all(|c| c.is_ascii_digit()) {
        return NaiveDate::from_ymd_opt(raw.parse().ok()?, 1, 1);
    }
    parse_month_day_year(raw)
}

fn parse_month_day_year(raw: &str) -> Option<NaiveDate> {
    let (month_day, year) = raw.split_once(',')?;
    let mut parts = month_day.split_whitespace();
    let month_name = parts.next()?.to_lowercase();
    let day: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    let month = MONTHS.iter().position(|m| *m == month_name)? as u32 + 1;
    let year = year.trim();
    if year.len() != 4 || !year.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    NaiveDate::from_ymd_opt(year.parse().ok()?, month, day)
}

/// ISO-like datetimes (`T` or space separator, optional seconds); any
/// accepted date form maps to midnight.
pub fn parse_datetime(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt);
        }
    }
    parse_date(raw).map(|d| d.and_time(NaiveTime::MIN))
}

fn parse_boolean(raw: &str) -> Option<bool> {
    match raw.to_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parses a string literal that is being compared against a temporal column.
fn parse_temporal_literal(raw: &str) -> Option<Value> {
    if let Some(d) = parse_date(raw) {
        return Some(Value::Date(d));
    }
    parse_datetime(raw).map(Value::Datetime)
}
