//! Checkpoint container.
//!
//! Layout: the 8-byte magic `SEVEXCK\0`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor's
//! values as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SEVEXCK\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    config_hash: String,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
    graph: serde_json::Value,
}

/// Trained parameters with the config and graph they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub graph: KnowledgeGraph,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            fingerprint: self.params.fingerprint(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            graph: serde_json::from_str(&self.graph.to_json()?)?,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(bad("config hash mismatch"));
        }
        let mut data = &bytes[20 + len..];
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            params.insert(&e.name, Tensor::new(e.shape.clone(), values)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if params.fingerprint() != manifest.fingerprint {
            return Err(bad("parameter fingerprint mismatch"));
        }
        let graph = KnowledgeGraph::from_json(&manifest.graph.to_string())?;
        Ok(Checkpoint {
            config: manifest.config,
            params,
            graph,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Node;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        params.insert("b", Tensor::vector(vec![0.1]));
        let graph = KnowledgeGraph::new(
            vec![Node {
                entity: "x".into(),
                summary: "s".into(),
                feature: vec![0.5, 0.25],
            }],
            vec![],
        )
        .unwrap();
        Checkpoint {
            config: RunConfig {
                seed: Some(9),
                ..RunConfig::default()
            },
            params,
            graph,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.fingerprint(), c.params.fingerprint());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
