//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then each parameter's values as little-endian `f64` in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{build_model, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DECLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    train_steps: u64,
    params: Vec<ParamEntry>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            train_steps: self.trained_steps,
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.store.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Model> {
        if take(&mut bytes, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(&mut bytes, hlen)?)?;
        if header.format_version != version {
            return Err(Error::Format("header and container versions disagree".into()));
        }
        let mut model = build_model(&header.config, header.seed)?;
        if header.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, config implies {}",
                header.params.len(),
                model.store.len()
            )));
        }
        for entry in &header.params {
            let id = model
                .store
                .id_of(&entry.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", entry.name)))?;
            let t = &mut model.store.get_mut(id).tensor;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let raw = take(&mut bytes, 8 * t.len())?;
            for (dst, chunk) in t.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
                let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite value in `{}`", entry.name)));
                }
                *dst = v;
            }
        }
        if !bytes.is_empty() {
            return Err(Error::Format("trailing bytes after the last parameter".into()));
        }
        model.trained_steps = header.train_steps;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
