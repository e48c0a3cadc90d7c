//! Binary checkpoints: a JSON manifest followed by raw little-endian f32
//! blobs in manifest order.
//!
//! Layout: `b"OMVSCKPT"`, u32 version, u64 manifest length, manifest bytes,
//! then the tensors' values back to back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OMVSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    config_hash: String,
    meta: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

/// Named tensors plus the hash of the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| Entry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let m = serde_json::to_vec(&manifest).expect("manifest serializes");
        let body: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + m.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mbytes = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut off = 20 + mlen;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let blob = bytes.get(off..off + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { config_hash: manifest.config_hash, meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let a = Tensor::from_vec(&[split], vals[..split].to_vec()).unwrap();
            let b = Tensor::from_vec(&[vals.len() - split, 1], vals[split..].to_vec()).unwrap();
            let mut meta = BTreeMap::new();
            meta.insert("step".to_string(), "3".to_string());
            let ck = Checkpoint { config_hash: "abc".into(), meta, tensors: vec![("a".into(), a), ("b".into(), b)] };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint {
            config_hash: "h".into(),
            meta: BTreeMap::new(),
            tensors: vec![("w".into(), Tensor::filled(&[3], 1.5))],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense-nonsense-nonsense").is_err());
    }
}
