//! Checkpoint file: the 8-byte magic `MGLCKPT1`, a little-endian `u32` header
//! length, a JSON header, then every parameter as little-endian `f64` in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{io_err, MglError, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MGLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub frame_size: (usize, usize),
    /// SHA-256 of the JSON encoding of `(model, frame_size)`.
    pub model_hash: String,
    pub params: Vec<ParamEntry>,
    /// Free-form training summary.
    pub meta: serde_json::Value,
}

pub fn model_hash(model: &ModelConfig, frame_size: (usize, usize)) -> String {
    let json = serde_json::to_vec(&(model, frame_size)).expect("model config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    frame_size: (usize, usize),
    store: &ParamStore,
    meta: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.clone(),
        frame_size,
        model_hash: model_hash(model, frame_size),
        params: store.iter().map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| MglError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| MglError::Checkpoint(format!("corrupt header: {e}")))?;
    Ok((header, &bytes[12 + len..]))
}

/// Loads parameter values into `store`, which must come from a model built
/// with the same `model` config and `frame_size`.
pub fn load_checkpoint(
    path: &Path,
    model: &ModelConfig,
    frame_size: (usize, usize),
    store: &mut ParamStore,
) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, payload) = read_header(&bytes)?;
    let expected = model_hash(model, frame_size);
    if header.model_hash != expected || header.model != *model || header.frame_size != frame_size {
        return Err(MglError::Checkpoint(format!(
            "checkpoint was trained for a different model (hash {} vs configured {expected})",
            header.model_hash
        )));
    }
    if header.params.len() != store.len() {
        return Err(MglError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * total {
        return Err(MglError::Checkpoint(format!("payload is {} bytes, header needs {}", payload.len(), 8 * total)));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let ids: Vec<_> = store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(MglError::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                entry.name,
                entry.shape,
                store.name(id),
                store.get(id).shape()
            )));
        }
        for v in store.get_mut(id).data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(header)
}
