//! Single-file checkpoint archive.
//!
//! ```text
//! magic "SHFRCKPT" | u32 LE format version | u64 LE header length
//! | JSON header | raw little-endian f32 tensor data
//! ```
//!
//! The header lists every tensor with its shape and byte range. Tensor names
//! are grouped by a prefix: `model/`, `ema/`, `adam.m/`, `adam.v/`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use super::model::ModelConfig;
use crate::config::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SHFRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<i64>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub manifest_hash: Option<String>,
    /// Opaque trainer state (configuration, counters).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub manifest_hash: Option<String>,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            step: 0,
            manifest_hash: None,
            extra: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, &Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v)))
            .collect()
    }

    pub fn insert_group<'a>(&mut self, prefix: &str, items: impl IntoIterator<Item = (&'a String, &'a Tensor)>) {
        for (k, v) in items {
            self.tensors.insert(format!("{prefix}/{k}"), v.detach().copy());
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let flat = t.to_kind(Kind::Float).contiguous().view([-1]);
            let values = Vec::<f32>::try_from(&flat)?;
            let offset = blob.len() as u64;
            for v in &values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.size(),
                offset,
                len: (values.len() * 4) as u64,
            });
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            step: self.step,
            manifest_hash: self.manifest_hash.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + h.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "archive format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body])?;
        if header.format_version != version {
            return Err(bad("header and preamble disagree on the format version"));
        }
        let blob = &bytes[body..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let (start, len) = (e.offset as usize, e.len as usize);
            let numel: i64 = e.shape.iter().product();
            if start + len > blob.len() || len != numel as usize * 4 {
                return Err(Error::Checkpoint(format!("tensor {} is truncated or mis-sized", e.name)));
            }
            let values: Vec<f32> = blob[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_slice(&values).view(e.shape.as_slice()));
        }
        Ok(Self {
            model: header.model,
            step: header.step,
            manifest_hash: header.manifest_hash,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a checkpoint file.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ModelConfig::tiny());
        c.step = 17;
        c.manifest_hash = Some("abc".into());
        c.extra = serde_json::json!({"k": 1});
        c.tensors.insert("model/w".into(), Tensor::from_slice(&[1.5f32, -0.0, f32::MIN_POSITIVE, 3.25]).view([2, 2]));
        c.tensors.insert("ema/w".into(), Tensor::from_slice(&[7.0f32]).view([1]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let d = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(d.step, 17);
        assert_eq!(d.model, c.model);
        assert_eq!(d.manifest_hash.as_deref(), Some("abc"));
        assert_eq!(d.extra, c.extra);
        for (k, v) in &c.tensors {
            let w = &d.tensors[k];
            assert_eq!(w.size(), v.size());
            let a = Vec::<f32>::try_from(v.view([-1])).unwrap();
            let b = Vec::<f32>::try_from(w.view([-1])).unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(d.group("ema").len(), 1);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn truncated_archive_is_refused() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ckpt.bin");
        sample().save(&p).unwrap();
        let d = Checkpoint::load(&p).unwrap();
        assert_eq!(d.tensors.len(), 2);
        assert_eq!(file_hash(&p).unwrap().len(), 64);
    }
}
