//! Parameter checkpoints: `weights.bin` (little-endian values in store order)
//! plus `manifest.json` (names, shapes, digest and caller metadata).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub kind: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub weights_sha256: String,
    pub meta: M,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_store<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.numel() * S::BYTES);
    for (_, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<S: Scalar, M: Serialize>(
    dir: &Path,
    kind: &str,
    store: &ParamStore<S>,
    meta: &M,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_store(store);
    let digest = hex_digest(&bytes);
    let manifest = Manifest {
        kind: kind.into(),
        dtype: S::DTYPE.into(),
        params: store
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        weights_sha256: digest.clone(),
        meta,
    };
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(digest)
}

pub fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Manifest<M>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Fills `store` (built from the same configuration) from disk after
/// checking kind, dtype, layout and digest.
pub fn load_into<S: Scalar>(dir: &Path, kind: &str, store: &mut ParamStore<S>) -> Result<()> {
    let manifest: Manifest<serde_json::Value> = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {kind}",
            dir.display(),
            manifest.kind
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} vs {}",
            manifest.dtype,
            S::DTYPE
        )));
    }
    let expected: Vec<ParamEntry> = store
        .iter()
        .map(|(n, t)| ParamEntry {
            name: n.into(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if manifest.params != expected {
        return Err(Error::Checkpoint(
            "parameter layout does not match the configuration".into(),
        ));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if hex_digest(&bytes) != manifest.weights_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} digest mismatch",
            wpath.display()
        )));
    }
    if bytes.len() != store.numel() * S::BYTES {
        return Err(Error::Checkpoint(format!(
            "{} has {} bytes, expected {}",
            wpath.display(),
            bytes.len(),
            store.numel() * S::BYTES
        )));
    }
    let mut chunks = bytes.chunks_exact(S::BYTES);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let n = store.get(id).numel();
        let data: Vec<S> = chunks.by_ref().take(n).map(S::read_le).collect();
        store.set(id, Tensor::from_vec(&shape, data)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("a", Tensor::randn(&[2, 3], 1.0, &mut rng));
        s.add("b", Tensor::randn(&[4], 1.0, &mut rng));
        s
    }

    #[test]
    fn round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let src = store(1);
        save(dir.path(), "test", &src, &serde_json::json!({"k": 1})).unwrap();
        let mut dst = store(2);
        load_into(dir.path(), "test", &mut dst).unwrap();
        assert_eq!(encode_store(&dst), encode_store(&src));
        assert!(load_into(dir.path(), "other", &mut dst).is_err());
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros(&[3, 2]));
        wrong.add("b", Tensor::zeros(&[4]));
        assert!(load_into(dir.path(), "test", &mut wrong).is_err());
        fs::write(dir.path().join(WEIGHTS_FILE), vec![0u8; 40]).unwrap();
        assert!(matches!(
            load_into(dir.path(), "test", &mut dst),
            Err(Error::Checkpoint(_))
        ));
    }
}
