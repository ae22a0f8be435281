use std::io::Write;
use std::path::Path;

use super::{hex, Aspect, AttributeSchema, TextProvider};
use crate::error::{Error, Result};
use crate::io::Reader;

/// Id of the "no lesion found" embedding.
pub const BACKGROUND_ID: usize = 0;

const MAGIC: &[u8; 4] = b"MLNB";
const VERSION: u32 = 1;

/// Stored text features: `t_0` at id 0, then one vector per (aspect, value).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    schema_hash: [u8; 32],
    dim: usize,
    entries: Vec<(Aspect, String)>,
    vectors: Vec<f32>,
}

impl EmbeddingBank {
    /// Builds a bank from `R + 1` row vectors in id order.
    pub fn new(schema: &AttributeSchema, rows: &[Vec<f32>]) -> Result<Self> {
        let r = schema.num_values();
        if rows.len() != r + 1 {
            return Err(Error::Shape(format!("bank needs {} vectors, got {}", r + 1, rows.len())));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("bank vectors must share a positive dimension".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite bank vector".into()));
        }
        let entries = (1..=r).map(|id| {
            let (a, v) = schema.entry(id).expect("id in range");
            (a, v.to_string())
        });
        Ok(EmbeddingBank {
            schema_hash: schema.hash(),
            dim,
            entries: entries.collect(),
            vectors: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of attribute vectors, `R` (excluding `t_0`).
    pub fn num_attributes(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn schema_hash(&self) -> [u8; 32] {
        self.schema_hash
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn background(&self) -> &[f32] {
        self.vector(BACKGROUND_ID)
    }

    /// All vectors as one row-major `(R + 1) × C` block.
    pub fn matrix(&self) -> &[f32] {
        &self.vectors
    }

    pub fn id_of(&self, aspect: Aspect, value: &str) -> Option<usize> {
        self.entries.iter().position(|(a, v)| *a == aspect && v == value).map(|i| i + 1)
    }

    pub fn entry(&self, id: usize) -> Option<(Aspect, &str)> {
        id.checked_sub(1).and_then(|i| self.entries.get(i)).map(|(a, v)| (*a, v.as_str()))
    }
}

/// Raw provider vectors for every description, in id order `1..=R`.
pub fn provider_features(schema: &AttributeSchema, provider: &dyn TextProvider) -> Result<Vec<Vec<f64>>> {
    let dim = provider.dim();
    schema
        .descriptions()
        .into_iter()
        .map(|d| {
            let v = provider.embed(&d)?;
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Provider { description: d, reason: "bad output vector".into() });
            }
            Ok(v)
        })
        .collect()
}

/// Embeds every description with `provider`, maps it through `projection` and
/// prepends `background` as `t_0`.
pub fn embed_descriptions(
    schema: &AttributeSchema,
    provider: &dyn TextProvider,
    projection: impl Fn(&[f64]) -> Vec<f64>,
    background: &[f64],
) -> Result<EmbeddingBank> {
    let feats = provider_features(schema, provider)?;
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let mut rows = vec![to32(background.to_vec())];
    rows.extend(feats.iter().map(|f| to32(projection(f))));
    EmbeddingBank::new(schema, &rows)
}

pub fn save_bank(bank: &EmbeddingBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&bank.schema_hash);
    out.extend_from_slice(&(bank.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    let index: String = bank.entries.iter().map(|(a, v)| format!("{}\t{}\n", a.name(), v)).collect();
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(index.as_bytes());
    for x in &bank.vectors {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a bank and checks it was built for `schema`.
pub fn load_bank(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<EmbeddingBank> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bank = decode(&bytes)?;
    if bank.schema_hash != schema.hash() {
        return Err(Error::format(
            "bank",
            format!("schema hash mismatch: file {}, expected {}", hex(&bank.schema_hash), schema.hash_hex()),
        ));
    }
    for (i, (a, v)) in bank.entries.iter().enumerate() {
        if schema.id_of(*a, v) != Some(i + 1) {
            return Err(Error::format("bank", format!("index entry {} ({a}: {v}) disagrees with schema", i + 1)));
        }
    }
    Ok(bank)
}

fn decode(bytes: &[u8]) -> Result<EmbeddingBank> {
    let mut r = Reader::new(bytes, "bank");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("bank", format!("unsupported version {version}")));
    }
    let schema_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let index_len = r.u32()? as usize;
    let index = std::str::from_utf8(r.take(index_len)?).map_err(|_| Error::format("bank", "index is not UTF-8"))?;
    let entries = index
        .lines()
        .map(|line| {
            let (a, v) = line.split_once('\t').ok_or_else(|| Error::format("bank", "malformed index line"))?;
            let a = Aspect::from_name(a).ok_or_else(|| Error::format("bank", format!("unknown aspect {a:?}")))?;
            Ok((a, v.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if entries.len() != n {
        return Err(Error::format("bank", format!("index has {} entries, header says {n}", entries.len())));
    }
    let count = (n + 1) * dim;
    let vectors = r.f32s(count)?;
    r.finish()?;
    Ok(EmbeddingBank { schema_hash, dim, entries, vectors })
}
