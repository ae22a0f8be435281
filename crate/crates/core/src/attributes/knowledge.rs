use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::Deserialize;

use super::{Aspect, AttributeSchema, StructuredReport};
use crate::error::{Error, Result};

const DEFAULT_TABLE: &str = include_str!("../../assets/knowledge.toml");

#[derive(Deserialize)]
struct TableFile {
    disease: Vec<RowEntry>,
}

#[derive(Deserialize)]
struct RowEntry {
    name: String,
    attributes: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseRow {
    pub name: String,
    pub admissible: BTreeMap<Aspect, BTreeSet<String>>,
}

impl DiseaseRow {
    pub fn admits(&self, aspect: Aspect, value: &str) -> bool {
        self.admissible.get(&aspect).is_some_and(|s| s.contains(value))
    }
}

/// Disease rows with their admissible values per aspect, bound to a schema.
#[derive(Clone, Debug)]
pub struct KnowledgeTable {
    rows: Vec<DiseaseRow>,
    schema: AttributeSchema,
}

impl KnowledgeTable {
    pub fn new(rows: Vec<DiseaseRow>, schema: &AttributeSchema) -> Result<Self> {
        let mut names = HashSet::new();
        for row in &rows {
            if !names.insert(row.name.as_str()) {
                return Err(Error::Schema(format!("disease {:?} listed twice", row.name)));
            }
            for (aspect, values) in &row.admissible {
                for v in values {
                    if !schema.contains(*aspect, v) {
                        return Err(Error::UnknownValue { aspect: aspect.to_string(), value: v.clone() });
                    }
                }
            }
        }
        Ok(KnowledgeTable { rows, schema: schema.clone() })
    }

    pub fn from_toml_str(text: &str, schema: &AttributeSchema) -> Result<Self> {
        let file: TableFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let rows = file
            .disease
            .into_iter()
            .map(|r| {
                let admissible = r
                    .attributes
                    .into_iter()
                    .map(|(a, vs)| {
                        let aspect =
                            Aspect::from_name(&a).ok_or_else(|| Error::Schema(format!("unknown aspect {a:?}")))?;
                        Ok((aspect, vs.into_iter().collect()))
                    })
                    .collect::<Result<_>>()?;
                Ok(DiseaseRow { name: r.name, admissible })
            })
            .collect::<Result<Vec<_>>>()?;
        KnowledgeTable::new(rows, schema)
    }

    pub fn load(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KnowledgeTable::from_toml_str(&text, schema)
    }

    /// The table shipped with the crate, over the bundled schema.
    pub fn default_table() -> Self {
        KnowledgeTable::from_toml_str(DEFAULT_TABLE, &AttributeSchema::default_schema())
            .expect("bundled knowledge table is valid")
    }

    pub fn rows(&self) -> &[DiseaseRow] {
        &self.rows
    }

    pub fn row(&self, name: &str) -> Option<&DiseaseRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }
}

/// Scores every disease by the number of aspects whose assigned value it
/// admits; sorted by descending score, ties in table order.
pub fn query_disease(assignment: &StructuredReport, table: &KnowledgeTable) -> Result<Vec<(String, u32)>> {
    let schema = &table.schema;
    for aspect in schema.aspects() {
        match assignment.get(aspect) {
            Some(v) if schema.contains(aspect, v) => {}
            v => {
                return Err(Error::UnknownValue {
                    aspect: aspect.to_string(),
                    value: v.unwrap_or_default().to_string(),
                })
            }
        }
    }
    let mut scored: Vec<(String, u32)> = table
        .rows
        .iter()
        .map(|row| {
            let score = schema
                .aspects()
                .filter(|&a| assignment.get(a).is_some_and(|v| row.admits(a, v)))
                .count() as u32;
            (row.name.clone(), score)
        })
        .collect();
    // Stable sort keeps table order among equal scores.
    scored.sort_by_key(|s| std::cmp::Reverse(s.1));
    Ok(scored)
}
