//! ImageNet weights from `.safetensors` files.
//!
//! Files live in the directory named by `ARTGESTURE_WEIGHTS_DIR` as
//! `<family>.safetensors` (e.g. `resnet50.safetensors`) and use torchvision
//! (ResNet) or timm (HRNet, SwinV2) parameter names. Classifier weights in
//! the file are ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use ndarray::IxDyn;
use serde_json::Value;

use super::{Backbone, ModelError};
use crate::autograd::Tensor;

pub const WEIGHTS_ENV: &str = "ARTGESTURE_WEIGHTS_DIR";

const PREFIXES: [&str; 4] = ["", "model.", "backbone.", "module."];

pub fn weights_dir() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Parse a safetensors file into f32 tensors.
pub fn read_safetensors(path: &Path) -> Result<BTreeMap<String, Tensor>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    parse_safetensors(&bytes)
}

pub fn parse_safetensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, String> {
    let header_len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or("file shorter than the 8-byte header length")?;
    let data_start = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or("header length past end of file")?;
    let header: BTreeMap<String, Value> =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| format!("bad header JSON: {e}"))?;
    let data = &bytes[data_start..];
    let mut out = BTreeMap::new();
    for (name, info) in header {
        if name == "__metadata__" {
            continue;
        }
        let dtype = info["dtype"].as_str().ok_or_else(|| format!("{name}: missing dtype"))?;
        let shape: Vec<usize> = info["shape"]
            .as_array()
            .ok_or_else(|| format!("{name}: missing shape"))?
            .iter()
            .map(|v| v.as_u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| format!("{name}: bad shape"))?;
        let offsets = info["data_offsets"].as_array().filter(|o| o.len() == 2).ok_or_else(|| format!("{name}: bad data_offsets"))?;
        let (begin, end) = (offsets[0].as_u64().unwrap_or(u64::MAX) as usize, offsets[1].as_u64().unwrap_or(0) as usize);
        let raw = data.get(begin..end).filter(|_| begin <= end).ok_or_else(|| format!("{name}: offsets out of range"))?;
        let numel: usize = shape.iter().product();
        let values: Vec<f32> = match dtype {
            "F32" => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            "F64" => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
            "F16" => raw.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32()).collect(),
            "BF16" => raw.chunks_exact(2).map(|c| bf16::from_le_bytes(c.try_into().unwrap()).to_f32()).collect(),
            // Integer tensors (e.g. num_batches_tracked) are never loaded.
            "I64" | "I32" | "I16" | "I8" | "U8" | "BOOL" => continue,
            other => return Err(format!("{name}: unsupported dtype {other}")),
        };
        if values.len() != numel {
            return Err(format!("{name}: {} values for shape {shape:?}", values.len()));
        }
        let t = Tensor::from_shape_vec(IxDyn(&shape), values).map_err(|e| format!("{name}: {e}"))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Write f32 tensors in safetensors layout.
pub fn write_safetensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> std::io::Result<()> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let begin = payload.len();
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            serde_json::json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [begin, payload.len()]}),
        );
    }
    let mut head = serde_json::to_vec(&Value::Object(header)).expect("json");
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut bytes = (head.len() as u64).to_le_bytes().to_vec();
    bytes.extend(head);
    bytes.extend(payload);
    std::fs::write(path, bytes)
}

/// Copy matching tensors into the backbone network. Every network
/// parameter must be present with the same shape.
pub fn apply_state(backbone: &mut Backbone, tensors: &BTreeMap<String, Tensor>) -> Result<usize, String> {
    let prefix = PREFIXES
        .iter()
        .copied()
        .max_by_key(|p| tensors.keys().filter(|k| k.starts_with(p)).count())
        .unwrap_or("");
    let mut missing = Vec::new();
    let mut loaded = 0;
    let mut first_error = None;
    backbone.visit_net_mut(&mut |name, param| {
        match tensors.get(&format!("{prefix}{name}")) {
            None => missing.push(name.to_string()),
            Some(t) if t.shape() != param.shape() => {
                first_error.get_or_insert_with(|| format!("{name}: file has {:?}, model has {:?}", t.shape(), param.shape()));
            }
            Some(t) => {
                param.set(t.clone());
                loaded += 1;
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(format!("{} parameters missing, e.g. {}", missing.len(), shown.join(", ")));
    }
    Ok(loaded)
}

pub(crate) fn load_pretrained(backbone: &mut Backbone) -> Result<(), ModelError> {
    let family = backbone.spec().family;
    let unavailable = |path: PathBuf, reason: String| ModelError::PretrainedWeightsUnavailable {
        family: family.as_str().to_string(),
        path,
        reason,
    };
    let dir = weights_dir().ok_or_else(|| unavailable(PathBuf::from(format!("${WEIGHTS_ENV}")), "variable not set".into()))?;
    let path = dir.join(format!("{}.safetensors", family.as_str()));
    let tensors = read_safetensors(&path).map_err(|e| unavailable(path.clone(), e))?;
    apply_state(backbone, &tensors).map_err(|e| unavailable(path, e))?;
    Ok(())
}
