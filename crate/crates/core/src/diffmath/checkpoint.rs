//! Checkpoint payload: a JSON manifest plus one raw little-endian block.
//!
//! ```text
//! <dir>/manifest.json   {format_version, dtype, entries[{name, shape}], byte_len, sha256, meta}
//! <dir>/values.bin      concatenated values in manifest entry order
//! ```
//!
//! Both files are written to a sibling temporary directory first and moved
//! into place with a single rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "values.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub entries: Vec<EntryMeta>,
    pub byte_len: usize,
    pub sha256: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save<T: Scalar>(
    dir: &Path,
    store: &ParameterStore<T>,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut blob = Vec::with_capacity(store.num_values() * T::BYTES);
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        entries.push(EntryMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        entries,
        byte_len: blob.len(),
        sha256: hex(&Sha256::digest(&blob)),
        meta,
    };

    let parent = dir
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent)?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(VALUES_FILE), &blob)?;
    fs::write(
        tmp.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("corrupted manifest {}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a store. Nothing is returned unless every check passes.
pub fn load<T: Scalar>(dir: &Path) -> Result<(ParameterStore<T>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values but {} was requested",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let blob = fs::read(dir.join(VALUES_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read value block: {e}")))?;
    if blob.len() != manifest.byte_len {
        return Err(Error::Checkpoint(format!(
            "value block is {} bytes, manifest says {}",
            blob.len(),
            manifest.byte_len
        )));
    }
    if hex(&Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Checkpoint("value block checksum mismatch".into()));
    }
    let expected: usize = manifest
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if expected * T::BYTES != blob.len() {
        return Err(Error::Checkpoint(
            "manifest shapes do not cover the value block".into(),
        ));
    }
    let mut store = ParameterStore::new();
    let mut offset = 0;
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = blob[offset..offset + n * T::BYTES]
            .chunks(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += n * T::BYTES;
        store.insert(e.name.clone(), Tensor::new(&e.shape, data)?)?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(
            "w",
            Tensor::from_f64(&[2, 2], &[1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let s = sample();
        save(&path, &s, BTreeMap::new()).unwrap();
        let (back, m) = load::<f64>(&path).unwrap();
        assert_eq!(m.dtype, "f64");
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &sample(), BTreeMap::new()).unwrap();
        fs::write(path.join(MANIFEST_FILE), b"{ not json").unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_reports_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &sample(), BTreeMap::new()).unwrap();
        let mut m = read_manifest(&path).unwrap();
        m.format_version = 99;
        fs::write(path.join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        match load::<f64>(&path) {
            Err(Error::Version {
                found: 99,
                expected,
            }) => assert_eq!(expected, FORMAT_VERSION),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &sample(), BTreeMap::new()).unwrap();
        let mut blob = fs::read(path.join(VALUES_FILE)).unwrap();
        blob[3] ^= 0x10;
        fs::write(path.join(VALUES_FILE), blob).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &sample(), BTreeMap::new()).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
