//! Checkpoint container: an 8-byte magic, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor as little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ANGIECK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data block.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config_digest: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config_digest: impl Into<String>, meta: serde_json::Value, params: ParamStore) -> Self {
        Self { kind: kind.into(), config_digest: config_digest.into(), meta, params }
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| {
                let e = TensorEntry { name: n.to_string(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config_digest: self.config_digest.clone(),
            tensors,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(20 + manifest.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])?;
        let data = &bytes[data_start..];
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let (lo, hi) = (4 * e.offset, 4 * (e.offset + n));
            if hi > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past end of data", e.name)));
            }
            let vals = data[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals));
        }
        Ok(Self { kind: manifest.kind, config_digest: manifest.config_digest, meta: manifest.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

/// Rounds every parameter through `f32`, matching what a save/load cycle does.
pub fn round_to_f32(store: &mut ParamStore) {
    let names = store.names().to_vec();
    for n in names {
        store.get_mut(&n).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.125]));
        p.insert("b", Tensor::new(vec![1], vec![7.0]));
        let ck = Checkpoint::new("vq", "abc", serde_json::json!({"steps": 3}), p.clone());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, "vq");
        assert_eq!(back.config_digest, "abc");
        assert_eq!(back.meta["steps"], 3);
        assert_eq!(back.params.get("a.weight"), p.get("a.weight"));
        assert_eq!(back.params.names(), p.names());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
