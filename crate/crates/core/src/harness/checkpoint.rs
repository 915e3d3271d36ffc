//! Checkpoint directory: `manifest.json` plus `weights.bin`, a flat blob of
//! little-endian `f64` values concatenated in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Seeds};
use super::fsio;
use crate::moe::{Model, ModelShape};
use crate::numcore::Tensor;
use crate::{Error, Result};

pub const FORMAT: &str = "elastic-moe-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub model: ModelShape,
    /// Run configuration document, verbatim.
    pub config: String,
    pub seeds: Seeds,
    pub epoch: usize,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn weights_blob(model: &Model) -> Vec<u8> {
    let mut blob = Vec::with_capacity(model.parameter_count() * 8);
    for (_, t) in model.named_tensors() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob
}

impl Checkpoint {
    pub fn new(model: Model, config_text: &str, seeds: Seeds, epoch: usize) -> Self {
        let mut offset = 0;
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                entry
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.to_string(),
            tensors,
            model: model.shape(),
            config: config_text.to_string(),
            seeds,
            epoch,
            weights_sha256: sha256_hex(&weights_blob(&model)),
        };
        Self { manifest, model }
    }

    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest)?)
    }

    /// Hash of the serialized manifest; identifies the run in reports.
    pub fn manifest_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.manifest_json()?.as_bytes()))
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.manifest.config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fsio::ensure_dir(dir)?;
        fsio::write_atomic(&dir.join(WEIGHTS_FILE), &weights_blob(&self.model))?;
        fsio::write_atomic(&dir.join(MANIFEST_FILE), self.manifest_json()?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest: Manifest = serde_json::from_str(&fsio::read_string(&dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT {
            return Err(fail(format!("unknown format {:?}", manifest.format)));
        }
        let blob = fsio::read(&dir.join(WEIGHTS_FILE))?;
        let digest = sha256_hex(&blob);
        if digest != manifest.weights_sha256 {
            return Err(fail(format!(
                "weights hash {digest} does not match manifest {}",
                manifest.weights_sha256
            )));
        }
        if blob.len() % 8 != 0 {
            return Err(fail("weights blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = Model::init(manifest.model, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.tensors.len() {
            return Err(fail("tensor count does not match model shape".into()));
        }
        for ((slot, entry), name) in model.tensors_mut().into_iter().zip(&manifest.tensors).zip(&names) {
            if &entry.name != name || entry.shape != slot.shape() {
                return Err(fail(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let end = entry.offset + slot.len();
            let data = values
                .get(entry.offset..end)
                .ok_or_else(|| fail(format!("tensor {} runs past the blob", entry.name)))?;
            *slot = Tensor::new(entry.shape.clone(), data.to_vec())?;
        }
        model.validate()?;
        Ok(Self { manifest, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Mode;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = RunConfig::new(Mode::Emoe);
        let model = Model::init(cfg.model_shape(), 3).unwrap();
        let ck = Checkpoint::new(model, &cfg.to_toml(), cfg.seeds, 2);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        assert_eq!(first, std::fs::read(dir2.path().join(WEIGHTS_FILE)).unwrap());
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn tampered_weights_are_rejected() {
        let cfg = RunConfig::new(Mode::Topk);
        let model = Model::init(cfg.model_shape(), 3).unwrap();
        let ck = Checkpoint::new(model, &cfg.to_toml(), cfg.seeds, 1);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob[0] ^= 1;
        std::fs::write(&path, blob).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
