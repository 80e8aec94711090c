//! Versioned binary container for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "DNRDCKPT"
//! version  u32
//! hlen     u32       length of the JSON header
//! header   hlen      {"meta": ..., "tensors": [{"name", "shape"}, ...]}
//! payload            f64 values of each tensor in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DNRDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + hjson.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let hend = 16 + hlen;
        if bytes.len() < hend {
            return Err(malformed("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * 8;
            if bytes.len() < end {
                return Err(malformed(format!("truncated payload for {}", entry.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| malformed(format!("missing tensor {name}")))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            rows in 1usize..4,
        ) {
            let n = values.len() - values.len() % rows;
            prop_assume!(n > 0);
            let t = Tensor::new(vec![rows, n / rows], values[..n].to_vec()).unwrap();
            let ck = Checkpoint {
                meta: serde_json::json!({"kind": "test", "levels": 15}),
                tensors: vec![("a.w".into(), t), ("a.b".into(), Tensor::zeros(&[3]))],
            };
            let bytes = ck.to_bytes().unwrap();
            let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let ck = Checkpoint {
            meta: serde_json::Value::Null,
            tensors: vec![("x".into(), Tensor::zeros(&[2]))],
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
