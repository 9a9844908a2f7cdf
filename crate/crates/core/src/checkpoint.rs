//! Checkpoint files: a length-prefixed JSON manifest (names, shapes, dtype,
//! offsets, config snapshot, rng state) followed by a raw little-endian
//! payload. The manifest is validated before any payload is touched, and a
//! save→load→save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::rng::RngSnapshot;
use crate::{Error, Result};

pub const FORMAT_TAG: &str = "samora-checkpoint-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into the payload section.
    pub offset: u64,
    pub byte_len: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub rng: Vec<RngSnapshot>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Parallel to manifest.tensors, always widened to f64 in memory.
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Snapshot every parameter in the store, in insertion order. `dtype`
    /// F32 narrows the stored payload; compute stays f64 either way.
    pub fn from_store(
        store: &ParamStore,
        config: serde_json::Value,
        rng: Vec<RngSnapshot>,
        dtype: Dtype,
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for id in store.ids() {
            let p = store.get(id);
            let byte_len = (p.value.len() * dtype.size()) as u64;
            entries.push(TensorEntry {
                name: store.name(id).to_string(),
                shape: p.value.shape().to_vec(),
                dtype,
                offset,
                byte_len,
                trainable: p.trainable,
            });
            tensors.push(p.value.clone());
            offset += byte_len;
        }
        Checkpoint {
            manifest: Manifest {
                format: FORMAT_TAG.to_string(),
                tensors: entries,
                config,
                rng,
            },
            tensors,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let manifest_bytes = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
        let payload_len: u64 = self.manifest.tensors.iter().map(|t| t.byte_len).sum();
        let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload_len as usize);
        out.extend((manifest_bytes.len() as u64).to_le_bytes());
        out.extend(&manifest_bytes);
        for (entry, tensor) in self.manifest.tensors.iter().zip(&self.tensors) {
            match entry.dtype {
                Dtype::F64 => out.extend(tensor.to_le_bytes()),
                Dtype::F32 => {
                    for &x in tensor.as_slice() {
                        out.extend((x as f32).to_le_bytes());
                    }
                }
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::Checkpoint(format!(
                "{}: truncated header ({} bytes)",
                path.display(),
                bytes.len()
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + manifest_len {
            return Err(Error::Checkpoint(format!(
                "{}: truncated manifest (declared {manifest_len} bytes, {} available)",
                path.display(),
                bytes.len() - 8
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
            .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "{}: unknown format {:?}",
                path.display(),
                manifest.format
            )));
        }
        let payload = &bytes[8 + manifest_len..];

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let expected = (count * entry.dtype.size()) as u64;
            if entry.byte_len != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': declared {} bytes but shape {:?} needs {expected}",
                    entry.name, entry.byte_len, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': truncated payload (needs bytes {start}..{end}, payload has {})",
                    entry.name,
                    payload.len()
                )));
            }
            let chunk = &payload[start..end];
            let data: Vec<f64> = match entry.dtype {
                Dtype::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': non-finite value in payload",
                    entry.name
                )));
            }
            tensors.push(Tensor::from_vec(&entry.shape, data).map_err(|_| {
                Error::Checkpoint(format!("tensor '{}': inconsistent shape {:?}", entry.name, entry.shape))
            })?);
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Install the stored values into a store with the same parameter set.
    /// Every checkpoint tensor must match a parameter by name and shape, and
    /// every store parameter must be covered.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (entry, tensor) in self.manifest.tensors.iter().zip(&self.tensors) {
            let id = store.lookup(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{}' has no matching parameter", entry.name))
            })?;
            let p = store.get_mut(id);
            if p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': checkpoint shape {:?} vs parameter shape {:?}",
                    entry.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = tensor.clone();
            p.trainable = entry.trainable;
        }
        for id in store.ids() {
            let name = store.name(id);
            if !self.manifest.tensors.iter().any(|t| t.name == name) {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' missing from checkpoint"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngState};

    fn sample_store(seed: u64) -> ParamStore {
        let mut rng = RngState::with_stream(seed, streams::ADAPTER);
        let mut store = ParamStore::new();
        store
            .add("alpha", Tensor::matrix(3, 4, rng.gaussian_vec(12)).unwrap(), true)
            .unwrap();
        store
            .add("beta", Tensor::vector(rng.gaussian_vec(5)), false)
            .unwrap();
        store.add("gamma", Tensor::scalar(rng.gaussian()), true).unwrap();
        store
    }

    fn snapshot(rng: &RngState) -> Vec<RngSnapshot> {
        vec![rng.snapshot()]
    }

    #[test]
    fn test_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let store = sample_store(1);
        let mut rng = RngState::with_stream(9, streams::TRAIN);
        rng.next_u64();
        let cfg = serde_json::json!({"lr": 3e-3, "epochs": 2});

        let ck = Checkpoint::from_store(&store, cfg, snapshot(&rng), Dtype::F64);
        ck.write(&p1).unwrap();
        let loaded = Checkpoint::read(&p1).unwrap();
        loaded.write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn test_apply_restores_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let store = sample_store(2);
        let ck = Checkpoint::from_store(&store, serde_json::Value::Null, vec![], Dtype::F64);
        ck.write(&path).unwrap();

        let mut other = sample_store(3);
        Checkpoint::read(&path).unwrap().apply(&mut other).unwrap();
        for id in store.ids() {
            let a = store.get(id);
            let b = other.lookup(store.name(id)).map(|i| other.get(i)).unwrap();
            assert_eq!(a.value.max_abs_diff(&b.value), 0.0);
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn test_rng_and_config_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut rng = RngState::with_stream(4, streams::TRAIN);
        for _ in 0..7 {
            rng.next_u64();
        }
        let cfg = serde_json::json!({"seed": 4, "variant": "samora"});
        let ck = Checkpoint::from_store(&sample_store(4), cfg.clone(), snapshot(&rng), Dtype::F64);
        ck.write(&path).unwrap();

        let loaded = Checkpoint::read(&path).unwrap();
        assert_eq!(loaded.manifest.config, cfg);
        assert_eq!(loaded.manifest.rng, snapshot(&rng));
        let mut restored = RngState::restore(&loaded.manifest.rng[0]).unwrap();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn test_truncated_payload_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let ck = Checkpoint::from_store(&sample_store(5), serde_json::Value::Null, vec![], Dtype::F64);
        ck.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 30]).unwrap();
        let err = Checkpoint::read(&path).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
        assert!(err.contains("beta") || err.contains("gamma"), "{err}");
    }

    #[test]
    fn test_truncated_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let ck = Checkpoint::from_store(&sample_store(6), serde_json::Value::Null, vec![], Dtype::F64);
        ck.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn test_shape_mismatch_on_apply_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let ck = Checkpoint::from_store(&sample_store(7), serde_json::Value::Null, vec![], Dtype::F64);
        ck.write(&path).unwrap();

        let mut rng = RngState::with_stream(8, streams::ADAPTER);
        let mut other = ParamStore::new();
        other
            .add("alpha", Tensor::matrix(4, 3, rng.gaussian_vec(12)).unwrap(), true)
            .unwrap();
        other.add("beta", Tensor::vector(rng.gaussian_vec(5)), false).unwrap();
        other.add("gamma", Tensor::scalar(0.0), true).unwrap();
        let err = Checkpoint::read(&path).unwrap().apply(&mut other).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
    }

    #[test]
    fn test_declared_byte_length_validated_against_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let ck = Checkpoint::from_store(&sample_store(9), serde_json::Value::Null, vec![], Dtype::F64);
        ck.write(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        manifest.tensors[0].byte_len -= 8;
        let mbytes = serde_json::to_vec(&manifest).unwrap();
        let mut rebuilt = (mbytes.len() as u64).to_le_bytes().to_vec();
        rebuilt.extend(&mbytes);
        rebuilt.extend(&bytes[8 + mlen..]);
        fs::write(&path, rebuilt).unwrap();

        let err = Checkpoint::read(&path).unwrap_err().to_string();
        assert!(err.contains("alpha") && err.contains("declared"), "{err}");
    }

    #[test]
    fn test_f32_storage_quantizes_but_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("i.ckpt");
        let p2 = dir.path().join("j.ckpt");
        let store = sample_store(10);
        let ck = Checkpoint::from_store(&store, serde_json::Value::Null, vec![], Dtype::F32);
        ck.write(&p1).unwrap();

        let loaded = Checkpoint::read(&p1).unwrap();
        let alpha = store.lookup("alpha").unwrap();
        let orig = &store.get(alpha).value;
        let got = &loaded.tensors[0];
        for (o, g) in orig.as_slice().iter().zip(got.as_slice()) {
            assert_eq!(*g, (*o as f32) as f64);
        }

        loaded.write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
