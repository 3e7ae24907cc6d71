//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SAICLCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header holding the model config
//! and the ordered parameter names and shapes, then every parameter's values
//! as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SAICLCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)?;
        let mut cursor = header_end;
        let mut params = BTreeMap::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(entry.name, Tensor::new(&entry.shape, data)?);
            cursor += 8 * n;
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Model::from_parts(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_bytes(&fs::read(path)?)
    }
}
