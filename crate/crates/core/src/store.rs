//! Persistence helpers: config hashing, atomic writes, and the named-tensor
//! blob format shared by checkpoints, task sets and activation traces.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! b"ICRLBLOB"  u32 version  u32 entry_count
//! per entry:   u32 name_len  name (utf-8)  u32 ndim  u64 dims[ndim]
//! then the f32 data of every entry, in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ICRLBLOB";
const VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value sorts object keys, giving a stable form
    let v = serde_json::to_value(value).expect("config serializes");
    let bytes = serde_json::to_vec(&v).expect("value serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Ordered collection of named f32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBlob {
    pub entries: BTreeMap<String, Tensor>,
}

impl TensorBlob {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.entries.insert(name.into(), Tensor::new(shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.entries.values() {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad blob magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let count = r.u32()? as usize;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            header.push((name, shape));
        }
        let mut entries = BTreeMap::new();
        for (name, shape) in header {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.insert(name, Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after blob".into()));
        }
        Ok(TensorBlob { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Raw little-endian f32 file with no header (shape lives in a manifest).
pub fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{} is not a f32 array", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_roundtrip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>(), 0..40),
            b in proptest::collection::vec(-1e6f32..1e6, 1..10),
        ) {
            let mut blob = TensorBlob::default();
            blob.insert("a", vec![a.len()], a.clone());
            blob.insert("layers.0.w", vec![1, b.len()], b.clone());
            let back = TensorBlob::from_bytes(&blob.to_bytes()).unwrap();
            let ga = &back.get("a").unwrap().data;
            prop_assert_eq!(ga.len(), a.len());
            for (x, y) in ga.iter().zip(&a) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(&back.get("layers.0.w").unwrap().data, &b);
        }
    }

    #[test]
    fn rejects_truncation() {
        let mut blob = TensorBlob::default();
        blob.insert("x", vec![2], vec![1.0, 2.0]);
        let bytes = blob.to_bytes();
        assert!(TensorBlob::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorBlob::from_bytes(b"NOTABLOB").is_err());
    }

    #[test]
    fn hash_ignores_nothing_but_formatting() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: f64,
        }
        assert_eq!(config_hash(&C { a: 1, b: 0.5 }), config_hash(&C { a: 1, b: 0.5 }));
        assert_ne!(config_hash(&C { a: 1, b: 0.5 }), config_hash(&C { a: 2, b: 0.5 }));
    }
}
