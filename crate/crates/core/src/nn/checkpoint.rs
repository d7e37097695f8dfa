//! Self-describing checkpoint container: magic bytes, a little-endian `u64`
//! header length, a JSON header, then raw little-endian `f64` buffers.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NnError};
use crate::autodiff::{AdamState, Dtype, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FFCKPT01";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    /// Free-form run metadata.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<Entry>,
    optimizer_step: Option<u64>,
    epoch: usize,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, adam: None, epoch: 0, rng: None, meta: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, dtype: Dtype, values: &mut dyn Iterator<Item = &f64>| {
            entries.push(Entry { name, shape, dtype, offset: data.len() as u64 });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.model.params.iter() {
            push(name.to_string(), t.shape().to_vec(), t.dtype(), &mut t.components());
        }
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.model.params.len() || adam.v.len() != self.model.params.len() {
                return Err(NnError::Format("optimizer state does not match the weights".into()));
            }
            for (i, name) in self.model.params.names().iter().enumerate() {
                push(format!("{M_PREFIX}{name}"), vec![adam.m[i].len()], Dtype::Real, &mut adam.m[i].iter());
                push(format!("{V_PREFIX}{name}"), vec![adam.v[i].len()], Dtype::Real, &mut adam.v[i].iter());
            }
        }
        let header = Header {
            model: self.model.config.clone(),
            tensors: entries,
            optimizer_step: self.adam.as_ref().map(|a| a.step),
            epoch: self.epoch,
            rng: self.rng,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| NnError::Format(e.to_string()))?;
        header.model.validate()?;
        let data = &body[hlen..];
        let read = |e: &Entry, count: usize| -> Result<Vec<f64>, NnError> {
            let start = e.offset as usize;
            let end = start.checked_add(count * 8).ok_or_else(|| bad("offset overflow"))?;
            let raw = data.get(start..end).ok_or_else(|| NnError::Format(format!("buffer for {} is truncated", e.name)))?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            if let Some(_name) = e.name.strip_prefix(M_PREFIX) {
                m.push(read(e, count)?);
            } else if let Some(_name) = e.name.strip_prefix(V_PREFIX) {
                v.push(read(e, count)?);
            } else {
                let t = match e.dtype {
                    Dtype::Real => Tensor::real(&e.shape, read(e, count)?)?,
                    Dtype::Complex => {
                        let mut all = read(e, 2 * count)?;
                        let im = all.split_off(count);
                        Tensor::complex(&e.shape, all, im)?
                    }
                };
                params.insert(e.name.clone(), t);
            }
        }
        let adam = match header.optimizer_step {
            Some(step) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer moments do not cover every weight"));
                }
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model: Model { config: header.model, params },
            adam,
            epoch: header.epoch,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
