//! Binary tensor container and checkpoint files.
//!
//! Tensor records use the LFTN layout: 8-byte magic `LFTN0001`, u32 rank,
//! rank x u32 dims, then the row-major little-endian f32 payload.
//! Checkpoints are a JSON header (config echo, stage tag, step count)
//! followed by named LFTN records.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const LFTN_MAGIC: &[u8; 8] = b"LFTN0001";
pub const CKPT_MAGIC: &[u8; 8] = b"MDCKPT01";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(LFTN_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != LFTN_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad tensor magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Stage tag such as "stage1", "lora", "flow", "controlnet".
    pub stage: String,
    pub step: u64,
    /// Echo of the producing run configuration.
    pub config: serde_json::Value,
    /// For adapter checkpoints: content hash of the base checkpoint file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let header = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tensor(&mut buf, t)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = &bytes[..];
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(r[..name_len].to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
            r = &r[name_len..];
            let t = read_tensor(&mut r)?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_sha256(&bytes))
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a named parameter map, for freeze-contract checks.
pub fn params_sha256(params: &BTreeMap<String, Tensor>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        hasher.update([0]);
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-style container of tensors with an id -> offset index.
pub struct TensorStore {
    records: Vec<u8>,
    index: BTreeMap<String, u64>,
}

impl Default for TensorStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorStore {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, t: &Tensor) -> Result<()> {
        if self.index.contains_key(id) {
            return Ok(()); // content-addressed: identical id means identical payload
        }
        self.index.insert(id.to_string(), self.records.len() as u64);
        write_tensor(&mut self.records, t)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<Tensor> {
        let &offset = self
            .index
            .get(id)
            .ok_or_else(|| Error::Checkpoint(format!("tensor id `{id}` not in store")))?;
        let mut r = &self.records[offset as usize..];
        read_tensor(&mut r)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.index.keys()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Writes `<path>` (records) and `<path>.idx` (JSON id -> offset map).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.records)?;
        let idx = serde_json::to_vec_pretty(&self.index)?;
        std::fs::write(path.with_extension("idx"), idx)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = std::fs::read(path)?;
        let idx = std::fs::read(path.with_extension("idx"))?;
        let index: BTreeMap<String, u64> = serde_json::from_slice(&idx)?;
        Ok(Self { records, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-7, -9.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], LFTN_MAGIC);
        let back = read_tensor(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                stage: "stage1".into(),
                step: 42,
                config: serde_json::json!({"lr": 2e-5}),
                base_hash: None,
            },
            tensors,
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors["w"], ckpt.tensors["w"]);
    }

    #[test]
    fn store_roundtrip_and_idempotent_insert() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.lftn");
        let mut store = TensorStore::new();
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        store.insert("a", &t).unwrap();
        let before = store.records.len();
        store.insert("a", &t).unwrap();
        assert_eq!(store.records.len(), before);
        store.save(&path).unwrap();
        let back = TensorStore::load(&path).unwrap();
        assert_eq!(back.get("a").unwrap(), t);
    }
}
