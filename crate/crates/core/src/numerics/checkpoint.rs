//! Binary checkpoint: `b"MMA1"`, u32 LE metadata length, UTF-8 JSON
//! metadata, then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMA1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn encode(config: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: config.clone(),
        params: store
            .iter()
            .map(|(n, t)| ManifestEntry { name: n.to_string(), shape: t.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing MMA1 magic"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + n).ok_or_else(|| bad("truncated metadata"))?;
    let meta: Metadata = serde_json::from_slice(json)?;
    let mut off = 8 + n;
    let mut store = ParamStore::new();
    for e in meta.params {
        let count: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + count * 4)
            .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
        off += count * 4;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((meta.config, store))
}

pub fn save(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = encode(config, store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap()).unwrap();
        let cfg = serde_json::json!({"d_model": 2});
        let bytes = encode(&cfg, &s).unwrap();
        assert_eq!(&bytes[..4], b"MMA1");
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(meta["params"][0]["name"], "w");
        assert_eq!(&bytes[8 + n..8 + n + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[8 + n + 4..], &(-2.5f32).to_le_bytes());
        let (c2, s2) = decode(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2.get(s2.id("w").unwrap()).data, vec![1.0, -2.5]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"XXXX\0\0\0\0").is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        let bytes = encode(&serde_json::Value::Null, &s).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
