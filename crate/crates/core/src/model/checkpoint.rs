//! Checkpoint layout:
//!
//! ```text
//! b"AGCK" | u32 LE header length | JSON header | f32 LE payload | sha256 of all preceding bytes
//! ```
//!
//! The header lists every parameter with its shape and payload offset.

use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, ModelConfig, ModelError, TwoStreamModel};
use crate::autograd::Tensor;
use crate::data::{LabelMap, PreprocessConfig};
use crate::nn::Module;

pub const FORMAT_VERSION: u32 = 1;
pub const CONCAT_ORDER: [&str; 2] = ["person", "context"];
const MAGIC: &[u8; 4] = b"AGCK";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub toolkit_version: String,
    pub model: ModelConfig,
    pub labels: LabelMap,
    pub concat_order: Vec<String>,
    pub preprocess: PreprocessConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

pub fn save_checkpoint(model: &TwoStreamModel, path: &Path) -> Result<(), ModelError> {
    save_checkpoint_with(model, path, serde_json::Value::Null)
}

/// Save with free-form metadata (e.g. the epoch and validation score).
pub fn save_checkpoint_with(model: &TwoStreamModel, path: &Path, metadata: serde_json::Value) -> Result<(), ModelError> {
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    model.visit("", &mut |name, p| {
        params.push(ParamEntry { name: name.to_string(), shape: p.shape().to_vec(), offset });
        offset += p.numel();
        for v in p.value().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        toolkit_version: crate::VERSION.to_string(),
        model: model.config().clone(),
        labels: model.labels().clone(),
        concat_order: CONCAT_ORDER.iter().map(|s| s.to_string()).collect(),
        preprocess: model.preprocess.clone(),
        params,
        metadata,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len() + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Read only the header (no checksum verification).
pub fn read_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let (header, _) = split(&bytes)?;
    serde_json::from_slice(header).map_err(|e| corrupt(format!("header: {e}")))
}

fn split(bytes: &[u8]) -> Result<(&[u8], &[u8]), ModelError> {
    if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize.checked_add(len).filter(|&e| e + DIGEST_LEN <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header = &bytes[8..end];
    let version = serde_json::from_slice::<serde_json::Value>(header)
        .map_err(|e| corrupt(format!("header: {e}")))?
        .get("format_version")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    if version.as_u64() != Some(FORMAT_VERSION as u64) {
        return Err(ModelError::VersionMismatch { found: version.to_string(), expected: FORMAT_VERSION });
    }
    Ok((header, &bytes[end..bytes.len() - DIGEST_LEN]))
}

pub fn load_checkpoint(path: &Path) -> Result<(TwoStreamModel, CheckpointHeader), ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let (header_bytes, payload) = split(&bytes)?;
    let body = &bytes[..bytes.len() - DIGEST_LEN];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - DIGEST_LEN..] {
        return Err(corrupt("checksum mismatch"));
    }
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.concat_order != CONCAT_ORDER {
        return Err(corrupt(format!("unsupported concat order {:?}", header.concat_order)));
    }
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not whole f32 values"));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut config = header.model.clone();
    // Weights come from the file, not from disk-resident pretrained files.
    config.crop.pretrained = false;
    if let Some(c) = &mut config.context {
        c.pretrained = false;
    }
    let mut model = build_model(&config, header.labels.clone(), 0)?;
    model.config = header.model.clone();
    model.preprocess = header.preprocess.clone();

    let entries: std::collections::HashMap<&str, &ParamEntry> =
        header.params.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut error = None;
    let mut seen = 0;
    model.visit_mut("", &mut |name, p| {
        if error.is_some() {
            return;
        }
        let Some(entry) = entries.get(name) else {
            error = Some(corrupt(format!("parameter {name} missing")));
            return;
        };
        let n: usize = entry.shape.iter().product();
        if entry.shape != p.shape() || entry.offset + n > values.len() {
            error = Some(corrupt(format!("parameter {name} has shape {:?} / offset {}", entry.shape, entry.offset)));
            return;
        }
        let t = Tensor::from_shape_vec(IxDyn(&entry.shape), values[entry.offset..entry.offset + n].to_vec())
            .expect("sized above");
        p.set(t);
        seen += 1;
    });
    if let Some(e) = error {
        return Err(e);
    }
    if seen != header.params.len() {
        return Err(corrupt(format!("{} stored parameters, model has {seen}", header.params.len())));
    }
    Ok((model, header))
}
