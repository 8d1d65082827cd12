//! Raw tensor files: `<stem>.tns` holds little-endian f32 values in
//! row-major order, `<stem>.json` describes them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
    byte_order: String,
}

pub fn tns_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.tns"))
}

pub fn sidecar_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// The `.tns` bytes and `.json` sidecar text for a tensor.
pub fn encode_tns(t: &Tensor<f32>) -> (Vec<u8>, String) {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let sidecar = Sidecar {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        layout: "row-major".into(),
        byte_order: "little".into(),
    };
    let mut json = serde_json::to_string(&sidecar).expect("sidecar serializes");
    json.push('\n');
    (bytes, json)
}

pub fn write_tns(dir: &Path, stem: &str, t: &Tensor<f32>) -> Result<()> {
    let (bytes, json) = encode_tns(t);
    let path = tns_path(dir, stem);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    let path = sidecar_path(dir, stem);
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn read_tns(dir: &Path, stem: &str) -> Result<Tensor<f32>> {
    let spath = sidecar_path(dir, stem);
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&spath, e))?;
    if sidecar.dtype != "f32" || sidecar.layout != "row-major" || sidecar.byte_order != "little" {
        return Err(Error::format(
            &spath,
            format!(
                "unsupported encoding {}/{}/{}",
                sidecar.dtype, sidecar.layout, sidecar.byte_order
            ),
        ));
    }
    let path = tns_path(dir, stem);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(
            &path,
            format!("{} bytes for shape {:?}", bytes.len(), sidecar.shape),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(sidecar.shape, data).map_err(|e| Error::format(&path, e.to_string()))
}
