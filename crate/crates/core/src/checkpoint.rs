//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "FSDCKPT\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes of UTF-8 JSON: config, metadata, array names and shapes
//! data    every array's values as f64, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::memory::{MemoryBank, MemorySource};
use crate::model::{EncoderConfig, EncoderParams, EncoderWeights};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"FSDCKPT\0";
pub const VERSION: u32 = 1;

const MEMORY_ARRAY: &str = "memory.centroids";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    /// `teacher` or `student`.
    pub role: String,
    pub seed: u64,
    pub step: usize,
    pub config_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemoryInfo {
    source: MemorySource,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    metadata: RunMetadata,
    arrays: Vec<ArrayInfo>,
    memory: Option<MemoryInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub memory: Option<MemoryBank>,
    pub metadata: RunMetadata,
}

fn corrupt(msg: impl Into<String>) -> FsdError {
    FsdError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.config)?;
        let mut arrays: Vec<(String, &Tensor)> = self.params.entries();
        if let Some(m) = &self.memory {
            arrays.push((MEMORY_ARRAY.to_string(), &m.centroids));
        }
        let header = Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            arrays: arrays
                .iter()
                .map(|(n, t)| ArrayInfo {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            memory: self.memory.as_ref().map(|m| MemoryInfo {
                source: m.source,
                trainable: m.trainable,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = arrays.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 20 + hlen;
        let mut tensors = BTreeMap::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| corrupt(format!("truncated array {}", a.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(a.name.clone(), Tensor::new(a.shape.clone(), data)?);
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let memory = match (&header.memory, tensors.remove(MEMORY_ARRAY)) {
            (Some(info), Some(centroids)) => Some(MemoryBank {
                centroids,
                trainable: info.trainable,
                source: info.source,
            }),
            (None, None) => None,
            _ => return Err(corrupt("memory header and array disagree")),
        };
        let params = EncoderWeights::<Tensor>::try_from_fn(header.config.n_layers, |name| {
            tensors
                .remove(name)
                .ok_or_else(|| corrupt(format!("missing array {name}")))
        })?;
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected array {name}")));
        }
        params.check(&header.config)?;
        Ok(Checkpoint {
            config: header.config,
            params,
            memory,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                FsdError::MissingDependency(format!("{} does not exist", path.display()))
            } else {
                e.into()
            }
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::init_student_memory;
    use crate::model::{init_params, Pooling};

    fn ckpt(with_memory: bool) -> Checkpoint {
        let config = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            vocab_size: 10,
            max_seq_len: 3,
            n_classes: 2,
            dropout_rate: 0.1,
            pooling: Pooling::Mean,
        };
        Checkpoint {
            params: init_params(&config, 3).unwrap(),
            memory: with_memory.then(|| init_student_memory(3, 12, 0.02, 1).unwrap()),
            config,
            metadata: RunMetadata {
                role: "student".into(),
                seed: 3,
                step: 17,
                config_hash: "abc".into(),
                extra: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for m in [false, true] {
            let c = ckpt(m);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert!(back.params.bit_eq(&c.params));
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.memory.is_some(), m);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ckpt(false).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
