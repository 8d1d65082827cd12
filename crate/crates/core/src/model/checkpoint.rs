//! Checkpoint directories: `weights.bin` (little-endian f32 tensors back to
//! back, in manifest order), `weights.json` (manifest) and, when optimizer
//! state is kept, `optimizer.bin` (first then second moments per tensor, same
//! order).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::M2ort;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "weights.json";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    /// SHA-256 of the training log rows written so far.
    pub loss_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    config: AdamConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    byte_order: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    metadata: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: M2ort<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub metadata: CheckpointMeta,
}

fn write_f32s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn new(model: M2ort<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            metadata: CheckpointMeta::default(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = self.model.params();
        let mut weights = Vec::with_capacity(params.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: weights.len() as u64,
            });
            write_f32s(&mut weights, t.data());
        }
        let optimizer = match &self.optimizer {
            Some(state) => {
                let mut bytes = Vec::with_capacity(weights.len() * 2);
                for (name, t) in params.iter() {
                    match state.moments.get(name) {
                        Some((m, v)) => {
                            write_f32s(&mut bytes, m.data());
                            write_f32s(&mut bytes, v.data());
                        }
                        None => {
                            let zeros = vec![0f32; 2 * t.numel()];
                            write_f32s(&mut bytes, &zeros);
                        }
                    }
                }
                let path = dir.join(OPTIMIZER_FILE);
                fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
                Some(OptimizerEntry {
                    step: state.step,
                    config: state.config,
                })
            }
            None => None,
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            byte_order: "little".into(),
            config: self.model.config().clone(),
            tensors,
            optimizer,
            metadata: self.metadata.clone(),
        };
        let path = dir.join(WEIGHTS_FILE);
        fs::write(&path, weights).map_err(|e| Error::io(path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&mpath, format!("unreadable manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!(
                    "format version {} (this build reads {FORMAT_VERSION})",
                    manifest.format_version
                ),
            ));
        }
        if manifest.dtype != "f32" || manifest.byte_order != "little" {
            return Err(Error::format(
                &mpath,
                format!("unsupported encoding {}/{}", manifest.dtype, manifest.byte_order),
            ));
        }
        let wpath = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut params = ParamStore::new();
        let mut expected_offset = 0u64;
        for entry in &manifest.tensors {
            if entry.offset != expected_offset {
                return Err(Error::format(
                    &mpath,
                    format!("tensor {} at offset {}, expected {expected_offset}", entry.name, entry.offset),
                ));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry.offset as usize + 4 * n;
            if end > bytes.len() {
                return Err(Error::format(&wpath, format!("truncated at tensor {}", entry.name)));
            }
            let t = Tensor::new(entry.shape.clone(), read_f32s(&bytes[entry.offset as usize..end]))
                .map_err(|e| Error::format(&mpath, e.to_string()))?;
            params.insert(entry.name.clone(), t);
            expected_offset = end as u64;
        }
        if expected_offset as usize != bytes.len() {
            return Err(Error::format(
                &wpath,
                format!("{} trailing bytes", bytes.len() - expected_offset as usize),
            ));
        }
        let optimizer = match &manifest.optimizer {
            Some(entry) => {
                let opath = dir.join(OPTIMIZER_FILE);
                let obytes = fs::read(&opath).map_err(|e| Error::io(&opath, e))?;
                if obytes.len() != 2 * bytes.len() {
                    return Err(Error::format(&opath, "size does not match weights"));
                }
                let mut moments = IndexMap::new();
                let mut off = 0;
                for (name, t) in params.iter() {
                    let n = 4 * t.numel();
                    let m = Tensor::new(t.shape().to_vec(), read_f32s(&obytes[off..off + n]))?;
                    let v = Tensor::new(t.shape().to_vec(), read_f32s(&obytes[off + n..off + 2 * n]))?;
                    moments.insert(name.to_string(), (m, v));
                    off += 2 * n;
                }
                Some(AdamState {
                    config: entry.config,
                    step: entry.step,
                    moments,
                })
            }
            None => None,
        };
        let model = M2ort::from_params(manifest.config, params).map_err(|e| match e {
            Error::InvalidConfig(_) => e,
            other => Error::format(&mpath, other.to_string()),
        })?;
        Ok(Self {
            model,
            optimizer,
            metadata: manifest.metadata,
        })
    }

    /// Loads and checks that the stored architecture matches `expected`.
    pub fn load_compatible(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        let diff = ckpt.model.config().architecture_diff(expected);
        if !diff.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint architecture differs in {}",
                diff.join(", ")
            )));
        }
        Ok(ckpt)
    }
}
