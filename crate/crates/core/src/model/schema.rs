use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::value::DataType;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub datatype: DataType,
    #[serde(default = "default_nullable")]
    pub nullable: bool,
}

fn default_nullable() -> bool {
    true
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, datatype: DataType) -> Self {
        Self {
            name: name.into(),
            datatype,
            nullable: true,
        }
    }

    pub fn required(name: impl Into<String>, datatype: DataType) -> Self {
        Self {
            name: name.into(),
            datatype,
            nullable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub attributes: Vec<AttributeDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_key: Option<Vec<String>>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, attributes: Vec<AttributeDef>) -> Self {
        Self {
            name: name.into(),
            attributes,
            primary_key: None,
        }
    }

    pub fn with_key(mut self, key: &[&str]) -> Self {
        self.primary_key = Some(key.iter().map(|k| k.to_string()).collect());
        self
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn key_attributes(&self) -> &[String] {
        self.primary_key.as_deref().unwrap_or(&[])
    }
}

/// A `(table, attribute)` endpoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttrRef {
    pub table: String,
    pub attribute: String,
}

impl AttrRef {
    pub fn new(table: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            attribute: attribute.into(),
        }
    }
}

impl fmt::Display for AttrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JoinLink {
    pub from: AttrRef,
    pub to: AttrRef,
}

impl JoinLink {
    pub fn new(from: AttrRef, to: AttrRef) -> Self {
        Self { from, to }
    }
}

impl fmt::Display for JoinLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.from, self.to)
    }
}

/// A query-specific relational schema.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableDef>,
    #[serde(default)]
    pub links: Vec<JoinLink>,
    #[serde(default)]
    pub version: u32,
}

impl Schema {
    pub fn new(tables: Vec<TableDef>, links: Vec<JoinLink>) -> Self {
        Self {
            tables,
            links,
            version: 0,
        }
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_mut(&mut self, name: &str) -> Option<&mut TableDef> {
        self.tables.iter_mut().find(|t| t.name == name)
    }

    /// Case-insensitive table lookup, used when matching free-text concepts.
    pub fn table_ci(&self, name: &str) -> Option<&TableDef> {
        let lower = name.to_lowercase();
        self.tables.iter().find(|t| t.name.to_lowercase() == lower)
    }

    pub fn resolve(&self, r: &AttrRef) -> Option<&AttributeDef> {
        self.table(&r.table)?.attribute(&r.attribute)
    }

    /// Tables reachable from `start` through links in either direction.
    pub fn reachable_from(&self, start: &str) -> BTreeSet<String> {
        let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for link in &self.links {
            adjacency
                .entry(&link.from.table)
                .or_default()
                .push(&link.to.table);
            adjacency
                .entry(&link.to.table)
                .or_default()
                .push(&link.from.table);
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(t) = queue.pop_front() {
            if !seen.insert(t.to_string()) {
                continue;
            }
            for next in adjacency.get(t).into_iter().flatten() {
                if !seen.contains(*next) {
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

/// Identifier syntax after normalization: `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Lists every invariant breach in `schema`; an empty list means valid.
pub fn validate_schema(schema: &Schema) -> Vec<String> {
    let mut problems = Vec::new();
    let mut table_names = BTreeSet::new();
    for table in &schema.tables {
        if !is_valid_identifier(&table.name) {
            problems.push(format!("invalid table name {:?}", table.name));
        }
        if !table_names.insert(table.name.as_str()) {
            problems.push(format!("duplicate table {}", table.name));
        }
        let mut attr_names = BTreeSet::new();
        for attr in &table.attributes {
            if !is_valid_identifier(&attr.name) {
                problems.push(format!("invalid attribute name {}.{:?}", table.name, attr.name));
            }
            if !attr_names.insert(attr.name.as_str()) {
                problems.push(format!("duplicate attribute {}.{}", table.name, attr.name));
            }
        }
        if let Some(key) = &table.primary_key {
            if key.is_empty() {
                problems.push(format!("empty primary key on {}", table.name));
            }
            for k in key {
                match table.attribute(k) {
                    None => problems.push(format!("primary key attribute {}.{k} missing", table.name)),
                    Some(a) if a.nullable => {
                        problems.push(format!("primary key attribute {}.{k} is nullable", table.name))
                    }
                    Some(_) => {}
                }
            }
        }
    }

    let mut links_ok = true;
    for link in &schema.links {
        let from = schema.resolve(&link.from);
        let to = schema.resolve(&link.to);
        if from.is_none() {
            problems.push(format!("dangling link endpoint {}", link.from));
        }
        if to.is_none() {
            problems.push(format!("dangling link endpoint {}", link.to));
        }
        match (from, to) {
            (Some(f), Some(t)) if f.datatype != t.datatype => problems.push(format!(
                "link {link} joins {} with {}",
                f.datatype, t.datatype
            )),
            (Some(_), Some(_)) => {}
            _ => links_ok = false,
        }
    }

    if links_ok && schema.tables.len() >= 2 {
        let first = &schema.tables[0].name;
        let reachable = schema.reachable_from(first);
        if schema.tables.iter().any(|t| !reachable.contains(&t.name)) {
            problems.push("link graph disconnected".to_string());
        }
    }
    problems
}

/// Order-independent digest of the schema's semantic content. The version
/// counter is excluded so that an unchanged schema keeps its fingerprint
/// across iterations.
pub fn schema_fingerprint(schema: &Schema) -> Result<String, ModelError> {
    if !validate_schema(schema).is_empty() {
        return Err(ModelError::InvalidSchema);
    }
    let mut tables: Vec<_> = schema
        .tables
        .iter()
        .map(|t| {
            let mut attrs: Vec<_> = t
                .attributes
                .iter()
                .map(|a| format!("{}:{}:{}", a.name, a.datatype, a.nullable))
                .collect();
            attrs.sort();
            let mut key = t.primary_key.clone().unwrap_or_default();
            key.sort();
            format!("table {}({})key[{}]", t.name, attrs.join(","), key.join(","))
        })
        .collect();
    tables.sort();
    let mut links: Vec<_> = schema.links.iter().map(|l| format!("link {l}")).collect();
    links.sort();
    links.dedup();

    let mut hasher = Sha256::new();
    for line in tables.iter().chain(links.iter()) {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn company_person() -> Schema {
        Schema::new(
            vec![
                TableDef::new(
                    "Company",
                    vec![
                        AttributeDef::required("name", DataType::Identifier),
                        AttributeDef::new("founding_year", DataType::Integer),
                        AttributeDef::new("ceo", DataType::Identifier),
                    ],
                )
                .with_key(&["name"]),
                TableDef::new(
                    "Person",
                    vec![
                        AttributeDef::required("person", DataType::Identifier),
                        AttributeDef::new("born", DataType::Date),
                    ],
                ),
            ],
            vec![JoinLink::new(
                AttrRef::new("Company", "ceo"),
                AttrRef::new("Person", "person"),
            )],
        )
    }

    #[test]
    fn single_table_is_valid() {
        let s = Schema::new(
            vec![TableDef::new("A", vec![AttributeDef::new("x", DataType::Text)])],
            vec![],
        );
        assert!(validate_schema(&s).is_empty());
    }

    #[test]
    fn two_tables_without_links_are_disconnected() {
        let s = Schema::new(
            vec![
                TableDef::new("A", vec![AttributeDef::new("x", DataType::Text)]),
                TableDef::new("B", vec![AttributeDef::new("y", DataType::Text)]),
            ],
            vec![],
        );
        assert_eq!(validate_schema(&s), vec!["link graph disconnected".to_string()]);
    }

    #[test]
    fn dangling_link_endpoint() {
        let s = Schema::new(
            vec![
                TableDef::new("A", vec![AttributeDef::new("x", DataType::Text)]),
                TableDef::new("B", vec![AttributeDef::new("z", DataType::Text)]),
            ],
            vec![JoinLink::new(AttrRef::new("A", "x"), AttrRef::new("B", "y"))],
        );
        assert_eq!(validate_schema(&s), vec!["dangling link endpoint B.y".to_string()]);
    }

    #[test]
    fn other_breaches() {
        let mut s = company_person();
        s.tables.push(s.tables[0].clone());
        s.tables[1].attributes[1].datatype = DataType::Text;
        s.tables[0].primary_key = Some(vec!["ceo".into()]);
        let problems = validate_schema(&s);
        assert!(problems.contains(&"duplicate table Company".to_string()));
        assert!(problems.iter().any(|p| p.contains("is nullable")));
        let mut s = company_person();
        s.links[0].to.attribute = "born".into();
        assert!(validate_schema(&s)[0].contains("joins identifier with date"));
        let mut s = company_person();
        s.tables[1].name = "2bad".into();
        s.links.clear();
        assert!(validate_schema(&s)[0].starts_with("invalid table name"));
    }

    #[test]
    fn fingerprint_ignores_order_and_version() {
        let s = company_person();
        let fp = schema_fingerprint(&s).unwrap();
        let mut reordered = s.clone();
        reordered.tables.reverse();
        reordered.tables[1].attributes.reverse();
        reordered.version = 7;
        assert_eq!(schema_fingerprint(&reordered).unwrap(), fp);
        assert_eq!(schema_fingerprint(&s).unwrap(), fp);
    }

    #[test]
    fn fingerprint_tracks_semantic_changes() {
        let s = company_person();
        let fp = schema_fingerprint(&s).unwrap();
        let mut renamed = s.clone();
        renamed.tables[0].attributes[1].name = "founded".into();
        assert_ne!(schema_fingerprint(&renamed).unwrap(), fp);
        let mut retyped = s.clone();
        retyped.tables[0].attributes[1].datatype = DataType::Real;
        assert_ne!(schema_fingerprint(&retyped).unwrap(), fp);
        let mut flipped = s.clone();
        let l = flipped.links[0].clone();
        flipped.links[0] = JoinLink::new(l.to, l.from);
        assert_ne!(schema_fingerprint(&flipped).unwrap(), fp);
    }

    #[test]
    fn fingerprint_rejects_invalid() {
        let mut s = company_person();
        s.links.clear();
        assert_eq!(schema_fingerprint(&s), Err(ModelError::InvalidSchema));
    }

    #[test]
    fn json_round_trip_keeps_fingerprint() {
        let s = company_person();
        let back = Schema::from_json(&s.to_json_pretty()).unwrap();
        assert_eq!(schema_fingerprint(&back).unwrap(), schema_fingerprint(&s).unwrap());
        let v: serde_json::Value = serde_json::from_str(&s.to_json_pretty()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["links", "tables", "version"]);
    }
}
