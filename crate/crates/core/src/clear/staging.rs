use std::collections::BTreeMap;

use super::ClearError;
use crate::model::{CandidateTuple, Constraint, Schema, TupleStatus, Value};

type Key = Vec<Option<Value>>;

/// Candidate tuples awaiting validation, with a primary-key index per table.
#[derive(Debug, Clone)]
pub struct StagingStore {
    schema: Schema,
    constraints: Vec<Constraint>,
    tables: BTreeMap<String, Vec<CandidateTuple>>,
    positions: BTreeMap<String, (String, usize)>,
    key_index: BTreeMap<String, BTreeMap<Key, Vec<String>>>,
}

impl StagingStore {
    pub fn new(schema: Schema, constraints: Vec<Constraint>) -> Result<Self, ClearError> {
        let problems: Vec<String> = constraints.iter().flat_map(|c| c.check(&schema)).collect();
        if !problems.is_empty() {
            return Err(ClearError::Constraint(problems.join("; ")));
        }
        let tables = schema.tables.iter().map(|t| (t.name.clone(), Vec::new())).collect();
        let key_index = schema.tables.iter().map(|t| (t.name.clone(), BTreeMap::new())).collect();
        Ok(Self {
            schema,
            constraints,
            tables,
            positions: BTreeMap::new(),
            key_index,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn key_of(&self, tuple: &CandidateTuple) -> Option<Key> {
        let table = self.schema.table(&tuple.table)?;
        if table.key_attributes().is_empty() {
            return None;
        }
        Some(
            table
                .key_attributes()
                .iter()
                .map(|a| tuple.value(a).cloned())
                .collect(),
        )
    }

    pub fn insert(&mut self, tuple: CandidateTuple) -> Result<(), ClearError> {
        if self.positions.contains_key(&tuple.tuple_id) {
            return Err(ClearError::DuplicateTuple(tuple.tuple_id));
        }
        let table = self
            .schema
            .table(&tuple.table)
            .ok_or_else(|| ClearError::Format(format!("unknown table {}", tuple.table)))?;
        let problems = tuple.check(table);
        if !problems.is_empty() {
            return Err(ClearError::Format(problems.join("; ")));
        }
        if let Some(key) = self.key_of(&tuple) {
            self.key_index
                .get_mut(&tuple.table)
                .expect("index per table")
                .entry(key)
                .or_default()
                .push(tuple.tuple_id.clone());
        }
        let rows = self.tables.get_mut(&tuple.table).expect("rows per table");
        self.positions
            .insert(tuple.tuple_id.clone(), (tuple.table.clone(), rows.len()));
        rows.push(tuple);
        Ok(())
    }

    pub fn get(&self, tuple_id: &str) -> Option<&CandidateTuple> {
        let (table, i) = self.positions.get(tuple_id)?;
        self.tables.get(table).map(|rows| &rows[*i])
    }

    pub fn contains(&self, tuple_id: &str) -> bool {
        self.positions.contains_key(tuple_id)
    }

    /// Applies `f` to one tuple and re-indexes it. The tuple id and table
    /// must not change.
    pub fn update(&mut self, tuple_id: &str, f: impl FnOnce(&mut CandidateTuple)) -> Result<(), ClearError> {
        let (table, i) = self
            .positions
            .get(tuple_id)
            .cloned()
            .ok_or_else(|| ClearError::Format(format!("unknown tuple {tuple_id}")))?;
        let old_key = self.key_of(&self.tables[&table][i]);
        let mut tuple = self.tables[&table][i].clone();
        f(&mut tuple);
        if tuple.tuple_id != tuple_id || tuple.table != table {
            return Err(ClearError::Format(format!("update changed the identity of {tuple_id}")));
        }
        let new_key = self.key_of(&tuple);
        if old_key != new_key {
            let index = self.key_index.get_mut(&table).expect("index per table");
            if let Some(old) = old_key {
                if let Some(ids) = index.get_mut(&old) {
                    ids.retain(|id| id != tuple_id);
                    if ids.is_empty() {
                        index.remove(&old);
                    }
                }
            }
            if let Some(new) = new_key {
                index.entry(new).or_default().push(tuple_id.to_string());
            }
        }
        self.tables.get_mut(&table).expect("rows per table")[i] = tuple;
        Ok(())
    }

    pub fn set_status(&mut self, tuple_id: &str, status: TupleStatus) -> Result<(), ClearError> {
        self.update(tuple_id, |t| t.status = status)
    }

    /// Tuples of one table in insertion order.
    pub fn rows(&self, table: &str) -> &[CandidateTuple] {
        self.tables.get(table).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every tuple, table by table in schema order.
    pub fn tuples(&self) -> impl Iterator<Item = &CandidateTuple> {
        self.schema
            .tables
            .iter()
            .flat_map(move |t| self.rows(&t.name).iter())
    }

    pub fn live_tuples(&self) -> impl Iterator<Item = &CandidateTuple> {
        self.tuples().filter(|t| t.status.is_live())
    }

    /// Ids of tuples in `table` whose key attributes equal `key`.
    pub fn by_key(&self, table: &str, key: &[Option<Value>]) -> &[String] {
        self.key_index
            .get(table)
            .and_then(|index| index.get(key))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Rebuilds the key index from scratch and compares it with the
    /// maintained one.
    pub fn indexes_consistent(&self) -> bool {
        let mut rebuilt: BTreeMap<String, BTreeMap<Key, Vec<String>>> =
            self.schema.tables.iter().map(|t| (t.name.clone(), BTreeMap::new())).collect();
        for t in self.tuples() {
            if let Some(key) = self.key_of(t) {
                rebuilt.get_mut(&t.table).unwrap().entry(key).or_default().push(t.tuple_id.clone());
            }
        }
        let sorted = |m: &BTreeMap<String, BTreeMap<Key, Vec<String>>>| {
            let mut m = m.clone();
            m.values_mut().flat_map(|i| i.values_mut()).for_each(|ids| ids.sort());
            m
        };
        let positions_ok = self
            .positions
            .iter()
            .all(|(id, (table, i))| self.tables[table].get(*i).map(|t| &t.tuple_id) == Some(id));
        positions_ok && sorted(&rebuilt) == sorted(&self.key_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttributeDef, ChunkRef, DataType, TableDef};

    fn store() -> StagingStore {
        let schema = Schema::new(
            vec![TableDef::new(
                "Person",
                vec![
                    AttributeDef::required("person_id", DataType::Identifier),
                    AttributeDef::new("dob", DataType::Date),
                ],
            )
            .with_key(&["person_id"])],
            vec![],
        );
        StagingStore::new(schema, vec![]).unwrap()
    }

    fn person(id: &str, pid: &str) -> CandidateTuple {
        CandidateTuple::new(id, "Person", ChunkRef::new("d", 0, 0, 1).unwrap())
            .with("person_id", Some(Value::Identifier(pid.into())))
    }

    #[test]
    fn insert_lookup_update() {
        let mut s = store();
        s.insert(person("a", "p1")).unwrap();
        s.insert(person("b", "p1")).unwrap();
        s.insert(person("c", "p2")).unwrap();
        assert!(matches!(s.insert(person("a", "p3")), Err(ClearError::DuplicateTuple(_))));
        let p1 = [Some(Value::Identifier("p1".into()))];
        assert_eq!(s.by_key("Person", &p1), ["a", "b"]);
        s.update("b", |t| {
            t.values.insert("person_id".into(), Some(Value::Identifier("p2".into())));
        })
        .unwrap();
        assert_eq!(s.by_key("Person", &p1), ["a"]);
        assert!(s.indexes_consistent());
        assert!(s.update("b", |t| t.tuple_id = "z".into()).is_err());
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn rejects_unknown_table_and_attribute() {
        let mut s = store();
        let t = CandidateTuple::new("x", "Nope", ChunkRef::new("d", 0, 0, 1).unwrap());
        assert!(s.insert(t).is_err());
        let t = person("y", "p").with("height", None);
        assert!(s.insert(t).is_err());
    }
}
