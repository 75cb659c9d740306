//! Single-file binary container used by every persisted artifact.
//!
//! Layout: magic, u32 header length, JSON header, then the raw blobs in
//! header order, each prefixed with a u64 length. The JSON header carries
//! artifact metadata plus the blob directory, so files are self-describing
//! and their serialization is deterministic.

use crate::error::{Error, Result};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 6] = b"FVREC1";

pub struct Archive {
    pub meta: Value,
    blobs: Vec<(String, Vec<u8>)>,
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Archive {
            meta,
            blobs: Vec::new(),
        }
    }

    pub fn add_blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.push((name.into(), bytes));
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| Error::validation(format!("archive has no blob `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::validation(format!("archive meta missing `{key}`")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::validation(format!("archive meta missing `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "meta": self.meta,
            "blobs": self.blobs.iter().map(|(n, b)| {
                serde_json::json!({"name": n, "len": b.len()})
            }).collect::<Vec<_>>(),
        });
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            MAGIC.len()
                + 4
                + header_bytes.len()
                + self.blobs.iter().map(|(_, b)| b.len() + 8).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, b) in &self.blobs {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::validation("not an artifact archive"));
        }
        let hl = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(
            bytes
                .get(10..10 + hl)
                .ok_or_else(|| Error::validation("archive truncated"))?,
        )?;
        let meta = header
            .get("meta")
            .cloned()
            .ok_or_else(|| Error::validation("archive header missing meta"))?;
        let dir = header
            .get("blobs")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::validation("archive header missing blob directory"))?;
        let mut blobs = Vec::with_capacity(dir.len());
        let mut off = 10 + hl;
        for entry in dir {
            let name = entry
                .get("name")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::validation("blob entry missing name"))?;
            let len = u64::from_le_bytes(
                bytes
                    .get(off..off + 8)
                    .ok_or_else(|| Error::validation("archive truncated"))?
                    .try_into()
                    .unwrap(),
            ) as usize;
            off += 8;
            let data = bytes
                .get(off..off + len)
                .ok_or_else(|| Error::validation("archive truncated"))?
                .to_vec();
            off += len;
            blobs.push((name.to_string(), data));
        }
        Ok(Archive { meta, blobs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Prerequisite(format!("cannot read artifact {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::validation("blob length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// SHA-256 of a file on disk.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(crate::nn::hex_digest(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut a = Archive::new(serde_json::json!({"kind": "test", "count": 3}));
        a.add_blob("values", f64s_to_bytes(&[1.0, -2.5, 3.25]));
        a.add_blob("empty", vec![]);
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.meta_str("kind").unwrap(), "test");
        assert_eq!(b.meta_u64("count").unwrap(), 3);
        assert_eq!(
            bytes_to_f64s(b.blob("values").unwrap()).unwrap(),
            vec![1.0, -2.5, 3.25]
        );
        assert!(b.blob("missing").is_err());
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut a = Archive::new(serde_json::json!({"z": 1, "a": 2}));
        a.add_blob("b", vec![1, 2, 3]);
        assert_eq!(a.to_bytes().unwrap(), a.to_bytes().unwrap());
    }
}
