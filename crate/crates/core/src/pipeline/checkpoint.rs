use std::path::Path;

use malenia_tensor::{AdamW, AdamWConfig, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::model::Malenia;
use super::train::EpochRecord;
use crate::attributes::{Aspect, AttributeSchema, EmbeddingBank};
use crate::error::{Error, Result};
use crate::io::{put_text, Reader};

const MAGIC: &[u8; 4] = b"MLNC";
const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: Config,
    pub model: Malenia<T>,
    pub optimizer: Option<AdamW<T>>,
    pub epoch: usize,
    pub curve: Vec<EpochRecord>,
    /// Text embeddings at save time.
    pub bank: EmbeddingBank,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        config: Config,
        model: Malenia<T>,
        optimizer: Option<AdamW<T>>,
        epoch: usize,
        curve: Vec<EpochRecord>,
    ) -> Result<Self> {
        let bank = model.export_bank()?;
        Ok(Checkpoint { config, model, optimizer, epoch, curve, bank })
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    config_hash: String,
    schema: Vec<(Aspect, Vec<String>)>,
    schema_hash: String,
    epoch: usize,
    curve: Vec<EpochRecord>,
    params: Vec<ParamMeta>,
    features: Vec<usize>,
    /// Optimiser step count, when moments are stored.
    optimizer_step: Option<u64>,
    bank_dim: usize,
}

fn put_scalars<T: Scalar>(out: &mut Vec<u8>, xs: &[T]) {
    for &x in xs {
        x.write_le(out);
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = r.take(n * T::BYTES)?;
    Ok(Tensor::new(shape, bytes.chunks_exact(T::BYTES).map(T::read_le).collect()))
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let m = &ck.model;
    let header = Header {
        config: ck.config.clone(),
        config_hash: ck.config.model_hash(),
        schema: m.schema().aspects().map(|a| (a, m.schema().vocab(a).to_vec())).collect(),
        schema_hash: m.schema().hash_hex(),
        epoch: ck.epoch,
        curve: ck.curve.clone(),
        params: m.store.iter().map(|(_, name, t)| ParamMeta { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
        features: m.features().shape().to_vec(),
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        bank_dim: ck.bank.dim(),
    };
    if ck.config.model != *m.config() {
        return Err(Error::Config("checkpoint config disagrees with the model".into()));
    }
    let json = serde_json::to_string(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    put_text(&mut out, &json);
    put_scalars(&mut out, m.features().data());
    for (_, _, t) in m.store.iter() {
        put_scalars(&mut out, t.data());
    }
    if let Some(o) = &ck.optimizer {
        for t in o.first.iter().chain(&o.second) {
            put_scalars(&mut out, t.data());
        }
    }
    for x in ck.bank.matrix() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let width = r.u32()? as usize;
    if width != T::BYTES {
        return Err(Error::format("checkpoint", format!("stored with {width}-byte scalars, loading {}-byte", T::BYTES)));
    }
    let h: Header = serde_json::from_str(r.text()?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    h.config.validate()?;
    if h.config.model_hash() != h.config_hash {
        return Err(Error::format("checkpoint", "config hash mismatch"));
    }
    let schema = AttributeSchema::new(h.schema)?;
    if schema.hash_hex() != h.schema_hash {
        return Err(Error::format("checkpoint", "schema hash mismatch"));
    }
    let features = read_tensor::<T>(&mut r, &h.features)?;
    let mut model = Malenia::with_features(&h.config.model, schema.clone(), features, 0)?;
    if model.store.len() != h.params.len() {
        return Err(Error::format("checkpoint", format!("{} parameters, model has {}", h.params.len(), model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, meta) in ids.iter().zip(&h.params) {
        if model.store.name(*id) != meta.name || model.store.get(*id).shape() != meta.shape.as_slice() {
            return Err(Error::format("checkpoint", format!("parameter {} does not match the architecture", meta.name)));
        }
        *model.store.get_mut(*id) = read_tensor(&mut r, &meta.shape)?;
    }
    let optimizer = match h.optimizer_step {
        Some(step) => {
            let mut read_all = || h.params.iter().map(|m| read_tensor::<T>(&mut r, &m.shape)).collect::<Result<Vec<_>>>();
            let first = read_all()?;
            let second = read_all()?;
            let t = &h.config.train;
            let config = AdamWConfig { beta1: t.beta1, beta2: t.beta2, eps: 1e-8, weight_decay: t.weight_decay };
            Some(AdamW { config, step, first, second })
        }
        None => None,
    };
    let rows = schema.num_values() + 1;
    let flat = r.f32s(rows * h.bank_dim)?;
    r.finish()?;
    let bank = EmbeddingBank::new(&schema, &flat.chunks(h.bank_dim.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>())?;
    Ok(Checkpoint { config: h.config, model, optimizer, epoch: h.epoch, curve: h.curve, bank })
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
