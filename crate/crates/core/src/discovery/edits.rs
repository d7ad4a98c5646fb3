use serde::{Deserialize, Serialize};

use crate::model::{validate_schema, AttrRef, AttributeDef, Constraint, DataType, JoinLink, Schema, TableDef};

/// One schema change proposed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SchemaEdit {
    AddTable { table: TableDef },
    DropTable { table: String },
    RenameTable { from: String, to: String },
    AddAttribute { table: String, attribute: AttributeDef },
    DropAttribute { table: String, attribute: String },
    RenameAttribute { table: String, from: String, to: String },
    AddLink { from: AttrRef, to: AttrRef },
    DropLink { from: AttrRef, to: AttrRef },
    SetDatatype { table: String, attribute: String, datatype: DataType },
    SetPrimaryKey { table: String, key: Vec<String> },
    AddConstraint { constraint: Constraint },
}

impl SchemaEdit {
    pub fn describe(&self) -> String {
        match self {
            SchemaEdit::AddTable { table } => format!("add table {}", table.name),
            SchemaEdit::DropTable { table } => format!("drop table {table}"),
            SchemaEdit::RenameTable { from, to } => format!("rename table {from} to {to}"),
            SchemaEdit::AddAttribute { table, attribute } => format!("add attribute {table}.{}", attribute.name),
            SchemaEdit::DropAttribute { table, attribute } => format!("drop attribute {table}.{attribute}"),
            SchemaEdit::RenameAttribute { table, from, to } => format!("rename attribute {table}.{from} to {to}"),
            SchemaEdit::AddLink { from, to } => format!("add link {from} -> {to}"),
            SchemaEdit::DropLink { from, to } => format!("drop link {from} -> {to}"),
            SchemaEdit::SetDatatype {
                table,
                attribute,
                datatype,
            } => format!("set {table}.{attribute} to {datatype}"),
            SchemaEdit::SetPrimaryKey { table, key } => format!("set primary key of {table} to ({})", key.join(", ")),
            SchemaEdit::AddConstraint { constraint } => format!("add constraint {}", constraint.constraint_id),
        }
    }
}

fn table_mut<'a>(schema: &'a mut Schema, name: &str) -> Result<&'a mut TableDef, String> {
    schema.table_mut(name).ok_or_else(|| format!("no table {name}"))
}

fn attribute_mut<'a>(schema: &'a mut Schema, table: &str, attr: &str) -> Result<&'a mut AttributeDef, String> {
    table_mut(schema, table)?
        .attributes
        .iter_mut()
        .find(|a| a.name == attr)
        .ok_or_else(|| format!("no attribute {table}.{attr}"))
}

/// Applies one edit in place. Constraint edits are returned rather than
/// applied since constraints live outside the schema.
pub fn apply_edit(schema: &mut Schema, edit: &SchemaEdit) -> Result<Option<Constraint>, String> {
    match edit {
        SchemaEdit::AddTable { table } => {
            if schema.table(&table.name).is_some() {
                return Err(format!("table {} already exists", table.name));
            }
            schema.tables.push(table.clone());
        }
        SchemaEdit::DropTable { table } => {
            let before = schema.tables.len();
            schema.tables.retain(|t| &t.name != table);
            if schema.tables.len() == before {
                return Err(format!("no table {table}"));
            }
            schema.links.retain(|l| &l.from.table != table && &l.to.table != table);
        }
        SchemaEdit::RenameTable { from, to } => {
            if schema.table(to).is_some() {
                return Err(format!("table {to} already exists"));
            }
            table_mut(schema, from)?.name = to.clone();
            for l in &mut schema.links {
                for end in [&mut l.from, &mut l.to] {
                    if &end.table == from {
                        end.table = to.clone();
                    }
                }
            }
        }
        SchemaEdit::AddAttribute { table, attribute } => {
            let t = table_mut(schema, table)?;
            if t.attribute(&attribute.name).is_some() {
                return Err(format!("attribute {table}.{} already exists", attribute.name));
            }
            t.attributes.push(attribute.clone());
        }
        SchemaEdit::DropAttribute { table, attribute } => {
            let t = table_mut(schema, table)?;
            let before = t.attributes.len();
            t.attributes.retain(|a| &a.name != attribute);
            if t.attributes.len() == before {
                return Err(format!("no attribute {table}.{attribute}"));
            }
            if let Some(key) = &mut t.primary_key {
                key.retain(|k| k != attribute);
                if key.is_empty() {
                    t.primary_key = None;
                }
            }
            let gone = AttrRef::new(table.clone(), attribute.clone());
            schema.links.retain(|l| l.from != gone && l.to != gone);
        }
        SchemaEdit::RenameAttribute { table, from, to } => {
            let t = table_mut(schema, table)?;
            if t.attribute(to).is_some() {
                return Err(format!("attribute {table}.{to} already exists"));
            }
            attribute_mut(schema, table, from)?.name = to.clone();
            let t = table_mut(schema, table)?;
            if let Some(key) = &mut t.primary_key {
                for k in key.iter_mut().filter(|k| *k == from) {
                    *k = to.clone();
                }
            }
            for l in &mut schema.links {
                for end in [&mut l.from, &mut l.to] {
                    if &end.table == table && &end.attribute == from {
                        end.attribute = to.clone();
                    }
                }
            }
        }
        SchemaEdit::AddLink { from, to } => {
            for end in [from, to] {
                if schema.resolve(end).is_none() {
                    return Err(format!("no attribute {end}"));
                }
            }
            let link = JoinLink::new(from.clone(), to.clone());
            if schema.links.contains(&link) {
                return Err(format!("link {link} already exists"));
            }
            schema.links.push(link);
        }
        SchemaEdit::DropLink { from, to } => {
            let before = schema.links.len();
            schema.links.retain(|l| !(&l.from == from && &l.to == to));
            if schema.links.len() == before {
                return Err(format!("no link {from} -> {to}"));
            }
        }
        SchemaEdit::SetDatatype {
            table,
            attribute,
            datatype,
        } => attribute_mut(schema, table, attribute)?.datatype = *datatype,
        SchemaEdit::SetPrimaryKey { table, key } => {
            let t = table_mut(schema, table)?;
            for k in key {
                if t.attribute(k).is_none() {
                    return Err(format!("no attribute {table}.{k}"));
                }
            }
            for a in t.attributes.iter_mut().filter(|a| key.contains(&a.name)) {
                a.nullable = false;
            }
            t.primary_key = Some(key.clone());
        }
        SchemaEdit::AddConstraint { constraint } => {
            let problems = constraint.check(schema);
            if !problems.is_empty() {
                return Err(problems.join("; "));
            }
            return Ok(Some(constraint.clone()));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub applied: Vec<String>,
    pub discarded: Vec<String>,
    pub constraints: Vec<Constraint>,
}

/// Applies a batch of edits. Edits that cannot apply are dropped one by
/// one; if the surviving batch leaves the schema invalid, the whole batch
/// is dropped and `schema` is left untouched.
pub fn apply_batch(schema: &mut Schema, edits: &[SchemaEdit]) -> BatchOutcome {
    let mut candidate = schema.clone();
    let mut out = BatchOutcome::default();
    for edit in edits {
        match apply_edit(&mut candidate, edit) {
            Ok(constraint) => {
                out.applied.push(edit.describe());
                out.constraints.extend(constraint);
            }
            Err(reason) => out.discarded.push(format!("{}: {reason}", edit.describe())),
        }
    }
    let problems = validate_schema(&candidate);
    if !problems.is_empty() {
        let reason = problems.join("; ");
        out.discarded
            .extend(out.applied.drain(..).map(|d| format!("{d}: batch leaves schema invalid ({reason})")));
        out.constraints.clear();
        return out;
    }
    *schema = candidate;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> Schema {
        Schema::new(
            vec![
                TableDef::new(
                    "Company",
                    vec![
                        AttributeDef::required("name", DataType::Identifier),
                        AttributeDef::new("ceo_id", DataType::Identifier),
                    ],
                )
                .with_key(&["name"]),
                TableDef::new(
                    "Person",
                    vec![
                        AttributeDef::required("person_id", DataType::Identifier),
                        AttributeDef::new("dob", DataType::Date),
                        AttributeDef::new("employer", DataType::Identifier),
                    ],
                )
                .with_key(&["person_id"]),
            ],
            vec![JoinLink::new(AttrRef::new("Person", "employer"), AttrRef::new("Company", "name"))],
        )
    }

    #[test]
    fn add_link_on_compatible_attributes() {
        let mut s = schema();
        let edit: SchemaEdit = serde_json::from_value(json!({
            "op": "add_link",
            "from": {"table": "Company", "attribute": "ceo_id"},
            "to": {"table": "Person", "attribute": "person_id"}
        }))
        .unwrap();
        let out = apply_batch(&mut s, &[edit]);
        assert_eq!(out.applied.len(), 1);
        assert_eq!(s.links.len(), 2);
    }

    #[test]
    fn edit_on_missing_table_is_discarded() {
        let mut s = schema();
        let out = apply_batch(
            &mut s,
            &[SchemaEdit::DropAttribute {
                table: "Nope".into(),
                attribute: "x".into(),
            }],
        );
        assert_eq!(out.discarded.len(), 1);
        assert_eq!(s, schema());
    }

    #[test]
    fn renames_follow_links_and_keys() {
        let mut s = schema();
        apply_batch(
            &mut s,
            &[
                SchemaEdit::RenameAttribute {
                    table: "Person".into(),
                    from: "person_id".into(),
                    to: "pid".into(),
                },
                SchemaEdit::RenameTable {
                    from: "Company".into(),
                    to: "Firm".into(),
                },
                SchemaEdit::RenameAttribute {
                    table: "Person".into(),
                    from: "dob".into(),
                    to: "date_of_birth".into(),
                },
            ],
        );
        assert_eq!(s.table("Person").unwrap().key_attributes(), ["pid"]);
        assert_eq!(s.links[0].to.table, "Firm");
        assert!(s.table("Person").unwrap().attribute("date_of_birth").is_some());
    }

    #[test]
    fn batch_is_atomic_on_invalid_result() {
        let mut s = schema();
        let out = apply_batch(
            &mut s,
            &[
                SchemaEdit::AddTable {
                    table: TableDef::new("University", vec![AttributeDef::required("name", DataType::Identifier)]),
                },
                SchemaEdit::SetDatatype {
                    table: "Person".into(),
                    attribute: "dob".into(),
                    datatype: DataType::Text,
                },
            ],
        );
        assert!(out.applied.is_empty());
        assert_eq!(out.discarded.len(), 2);
        assert!(out.discarded[0].contains("disconnected"));
        assert_eq!(s, schema());
    }

    #[test]
    fn add_table_with_link_together() {
        let mut s = schema();
        let out = apply_batch(
            &mut s,
            &[
                SchemaEdit::AddAttribute {
                    table: "Person".into(),
                    attribute: AttributeDef::new("alma_mater", DataType::Identifier),
                },
                SchemaEdit::AddTable {
                    table: TableDef::new("University", vec![AttributeDef::required("name", DataType::Identifier)])
                        .with_key(&["name"]),
                },
                SchemaEdit::AddLink {
                    from: AttrRef::new("Person", "alma_mater"),
                    to: AttrRef::new("University", "name"),
                },
            ],
        );
        assert_eq!(out.applied.len(), 3);
        assert!(validate_schema(&s).is_empty());
    }

    #[test]
    fn dropping_key_attribute_clears_key_and_links() {
        let mut s = schema();
        apply_edit(
            &mut s,
            &SchemaEdit::DropAttribute {
                table: "Company".into(),
                attribute: "name".into(),
            },
        )
        .unwrap();
        assert!(s.table("Company").unwrap().primary_key.is_none());
        assert!(s.links.is_empty());
    }

    #[test]
    fn constraint_edits_are_checked() {
        let mut s = schema();
        let bad: SchemaEdit = serde_json::from_value(json!({
            "op": "add_constraint",
            "constraint": {"constraint_id": "r", "kind": "numeric_range", "table": "Person", "attribute": "dob", "min": 0, "max": 1}
        }))
        .unwrap();
        let out = apply_batch(&mut s, &[bad]);
        assert!(out.constraints.is_empty());
        assert_eq!(out.discarded.len(), 1);
    }
}
