//! Directory checkpoints: `manifest.json` describing every tensor plus a
//! flat `tensors.bin` of little-endian f32 blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};

pub const FORMAT: &str = "avsr-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: Role,
    pub byte_offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub metadata: Value,
    pub tensors: Vec<TensorEntry>,
}

/// Size in bytes of the blob a store serializes to.
pub fn serialized_size(store: &ParamStore) -> usize {
    store.numel() * std::mem::size_of::<f32>()
}

pub fn save(dir: &Path, store: &ParamStore, metadata: Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(serialized_size(store));
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f32".into(),
            role: p.role,
            byte_offset: blob.len() as u64,
            sha256: p.sha256(),
        });
        blob.extend_from_slice(&p.bytes());
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        metadata,
        tensors,
    };
    fs::write(dir.join(BLOB), blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path.clone()))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads and verifies every tensor against its recorded hash.
pub fn load(dir: &Path) -> Result<(ParamStore, Value)> {
    let m = read_manifest(dir)?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|_| Error::Missing(blob_path))?;
    let mut store = ParamStore::new();
    for t in &m.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let start = t.byte_offset as usize;
        let bytes = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{} runs past the end of {BLOB}", t.name)))?;
        let digest = hex::encode(Sha256::digest(bytes));
        if digest != t.sha256 {
            return Err(Error::Checkpoint(format!("{}: hash mismatch", t.name)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&t.name, &t.shape, t.role, data)?;
    }
    Ok((store, m.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", &[2, 3], Role::Base, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        s.insert("b.lora_a", &[1, 2], Role::Adapter, vec![-1.0, 0.25]).unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        save(dir.path(), &s, serde_json::json!({"scenario": "music"})).unwrap();
        let (back, meta) = load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta["scenario"], "music");
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.tensors[1].byte_offset, 24);
        assert_eq!(fs::metadata(dir.path().join(BLOB)).unwrap().len() as usize, serialized_size(&s));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store(), Value::Null).unwrap();
        let mut blob = fs::read(dir.path().join(BLOB)).unwrap();
        blob[0] ^= 1;
        fs::write(dir.path().join(BLOB), blob).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::Missing(_))));
    }
}
