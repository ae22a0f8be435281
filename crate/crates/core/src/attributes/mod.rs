//! Attribute schema, structured lesion reports, the text-embedding bank and the
//! clinical knowledge table.

mod bank;
mod knowledge;
mod provider;

pub use bank::{embed_descriptions, load_bank, provider_features, save_bank, EmbeddingBank, BACKGROUND_ID};
pub use knowledge::{query_disease, DiseaseRow, KnowledgeTable};
pub use provider::{CountingProvider, HashingProvider, TextProvider};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The eight aspects a lesion is described by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aspect {
    Location,
    Shape,
    Density,
    #[serde(rename = "Density Variations")]
    DensityVariations,
    #[serde(rename = "Surface Characteristics")]
    Surface,
    #[serde(rename = "Enhancement Status")]
    Enhancement,
    #[serde(rename = "Relationship with Surrounding Organs")]
    Relationship,
    #[serde(rename = "Specific Features")]
    SpecificFeatures,
}

impl Aspect {
    pub const ALL: [Aspect; 8] = [
        Aspect::Location,
        Aspect::Shape,
        Aspect::Density,
        Aspect::DensityVariations,
        Aspect::Surface,
        Aspect::Enhancement,
        Aspect::Relationship,
        Aspect::SpecificFeatures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Location => "Location",
            Aspect::Shape => "Shape",
            Aspect::Density => "Density",
            Aspect::DensityVariations => "Density Variations",
            Aspect::Surface => "Surface Characteristics",
            Aspect::Enhancement => "Enhancement Status",
            Aspect::Relationship => "Relationship with Surrounding Organs",
            Aspect::SpecificFeatures => "Specific Features",
        }
    }

    pub fn from_name(name: &str) -> Option<Aspect> {
        Aspect::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Deserialize)]
struct SchemaFile {
    aspect: Vec<AspectEntry>,
}

#[derive(Deserialize)]
struct AspectEntry {
    name: String,
    values: Vec<String>,
}

/// Ordered aspects with their value vocabularies.
///
/// Embedding ids are assigned in aspect order, then vocabulary order, starting
/// at 1; id 0 is reserved for the "no lesion found" embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    aspects: Vec<(Aspect, Vec<String>)>,
}

const DEFAULT_SCHEMA: &str = include_str!("../../assets/schema.toml");

impl AttributeSchema {
    pub fn new(aspects: Vec<(Aspect, Vec<String>)>) -> Result<Self> {
        if aspects.len() != 8 {
            return Err(Error::Schema(format!("expected 8 aspects, found {}", aspects.len())));
        }
        let mut seen = HashSet::new();
        for (aspect, values) in &aspects {
            if !seen.insert(*aspect) {
                return Err(Error::Schema(format!("aspect {aspect} listed twice")));
            }
            if values.is_empty() {
                return Err(Error::Schema(format!("aspect {aspect} has no values")));
            }
            let mut vs = HashSet::new();
            for v in values {
                if !vs.insert(v.as_str()) {
                    return Err(Error::Schema(format!("duplicate value {v:?} in {aspect}")));
                }
            }
        }
        Ok(AttributeSchema { aspects })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let aspects = file
            .aspect
            .into_iter()
            .map(|e| {
                Aspect::from_name(&e.name)
                    .map(|a| (a, e.values))
                    .ok_or_else(|| Error::Schema(format!("unknown aspect {:?}", e.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        AttributeSchema::new(aspects)
    }

    /// The schema shipped with the crate.
    pub fn default_schema() -> Self {
        AttributeSchema::from_toml_str(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn aspects(&self) -> impl Iterator<Item = Aspect> + '_ {
        self.aspects.iter().map(|(a, _)| *a)
    }

    pub fn vocab(&self, aspect: Aspect) -> &[String] {
        self.aspects.iter().find(|(a, _)| *a == aspect).map(|(_, v)| v.as_slice()).unwrap_or(&[])
    }

    pub fn contains(&self, aspect: Aspect, value: &str) -> bool {
        self.vocab(aspect).iter().any(|v| v == value)
    }

    /// Number of attribute descriptions, `R`.
    pub fn num_values(&self) -> usize {
        self.aspects.iter().map(|(_, v)| v.len()).sum()
    }

    /// Embedding id of an (aspect, value) pair, in `1..=R`.
    pub fn id_of(&self, aspect: Aspect, value: &str) -> Option<usize> {
        let mut offset = 1;
        for (a, values) in &self.aspects {
            if *a == aspect {
                return values.iter().position(|v| v == value).map(|i| offset + i);
            }
            offset += values.len();
        }
        None
    }

    /// Ids of one aspect's values, in vocabulary order.
    pub fn ids_of_aspect(&self, aspect: Aspect) -> std::ops::Range<usize> {
        let mut offset = 1;
        for (a, values) in &self.aspects {
            if *a == aspect {
                return offset..offset + values.len();
            }
            offset += values.len();
        }
        offset..offset
    }

    /// Inverse of [`AttributeSchema::id_of`].
    pub fn entry(&self, id: usize) -> Option<(Aspect, &str)> {
        let mut offset = 1;
        for (a, values) in &self.aspects {
            if id >= offset && id < offset + values.len() {
                return Some((*a, values[id - offset].as_str()));
            }
            offset += values.len();
        }
        None
    }

    /// Description strings in id order (`1..=R`).
    pub fn descriptions(&self) -> Vec<String> {
        self.aspects
            .iter()
            .flat_map(|(a, values)| values.iter().map(move |v| description(*a, v)))
            .collect()
    }

    /// SHA-256 over the ordered aspects and values.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (a, values) in &self.aspects {
            h.update(a.name().as_bytes());
            h.update([0x1e]);
            for v in values {
                h.update(v.as_bytes());
                h.update([0x1f]);
            }
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<AttributeSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AttributeSchema::from_toml_str(&text)
}

/// Text fed to the embedding provider for one attribute value.
pub fn description(aspect: Aspect, value: &str) -> String {
    format!("{}: {}", aspect.name(), value)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One value per aspect for a single lesion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport(pub BTreeMap<Aspect, String>);

impl StructuredReport {
    pub fn new() -> Self {
        StructuredReport(BTreeMap::new())
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (Aspect, S)>) -> Self {
        StructuredReport(pairs.into_iter().map(|(a, v)| (a, v.into())).collect())
    }

    pub fn get(&self, aspect: Aspect) -> Option<&str> {
        self.0.get(&aspect).map(String::as_str)
    }

    pub fn set(&mut self, aspect: Aspect, value: impl Into<String>) {
        self.0.insert(aspect, value.into());
    }

    /// Checks totality and that every value exists in the schema.
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for aspect in schema.aspects() {
            match self.get(aspect) {
                None => {
                    return Err(Error::UnknownValue { aspect: aspect.to_string(), value: String::new() })
                }
                Some(v) if !schema.contains(aspect, v) => {
                    return Err(Error::UnknownValue { aspect: aspect.to_string(), value: v.to_string() })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Embedding ids of the eight values, in schema aspect order.
    pub fn ids(&self, schema: &AttributeSchema) -> Result<Vec<usize>> {
        schema
            .aspects()
            .map(|a| {
                let v = self.get(a).unwrap_or("");
                schema
                    .id_of(a, v)
                    .ok_or_else(|| Error::UnknownValue { aspect: a.to_string(), value: v.to_string() })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_schema_has_eight_aspects() {
        let s = AttributeSchema::default_schema();
        assert_eq!(s.aspects().count(), 8);
        for v in ["Round-like", "Cystic", "Nodular"] {
            assert!(s.contains(Aspect::Shape, v));
        }
        assert_eq!(s.vocab(Aspect::Enhancement), ["Enhanced CT", "Non-contrast CT"]);
    }

    #[test]
    fn seven_aspects_rejected() {
        let text = DEFAULT_SCHEMA.rsplit_once("[[aspect]]").unwrap().0;
        assert!(matches!(AttributeSchema::from_toml_str(text), Err(Error::Schema(_))));
    }

    #[test]
    fn duplicate_values_rejected() {
        let text = DEFAULT_SCHEMA.replace("\"Homogeneous\", \"Heterogeneous\"", "\"Homogeneous\", \"Homogeneous\"");
        assert!(matches!(AttributeSchema::from_toml_str(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn ids_round_trip() {
        let s = AttributeSchema::default_schema();
        let r = s.num_values();
        for id in 1..=r {
            let (a, v) = s.entry(id).unwrap();
            assert_eq!(s.id_of(a, v), Some(id));
            assert!(s.ids_of_aspect(a).contains(&id));
        }
        assert_eq!(s.entry(0), None);
        assert_eq!(s.entry(r + 1), None);
        assert_eq!(s.descriptions().len(), r);
        assert_eq!(s.descriptions()[0], "Location: Colon");
    }

    #[test]
    fn hash_tracks_vocabulary() {
        let a = AttributeSchema::default_schema();
        let b = AttributeSchema::from_toml_str(&DEFAULT_SCHEMA.replace("\"Colon\"", "\"Rectum\"")).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), AttributeSchema::default_schema().hash());
    }

    #[test]
    fn report_validation() {
        let s = AttributeSchema::default_schema();
        let mut r = StructuredReport::new();
        for a in s.aspects() {
            r.set(a, s.vocab(a)[0].clone());
        }
        assert!(r.validate(&s).is_ok());
        assert_eq!(r.ids(&s).unwrap().len(), 8);
        r.0.remove(&Aspect::Shape);
        assert!(matches!(r.validate(&s), Err(Error::UnknownValue { .. })));
        r.set(Aspect::Shape, "Hexagonal");
        assert!(matches!(r.ids(&s), Err(Error::UnknownValue { .. })));
    }
}
