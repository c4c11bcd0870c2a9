//! Named-tensor checkpoints.
//!
//! ```text
//! "CQCK" | u32 version | u32 manifest length | manifest (JSON) | f32 LE data
//! ```
//! The manifest lists `{name, shape, offset}` sorted by name; `offset` counts floats from
//! the start of the data section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Params;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode_checkpoint(params: &impl Params) -> Vec<u8> {
    let mut named = params.tensors();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut manifest = Vec::with_capacity(named.len());
    let mut data = Vec::new();
    let mut offset = 0;
    for (name, t) in &named {
        manifest.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Overwrites every tensor of `params` with the stored values. Names and shapes must match
/// exactly in both directions.
pub fn decode_checkpoint_into(bytes: &[u8], params: &mut impl Params) -> Result<(), CheckpointError> {
    let fmt = |s: &str| CheckpointError::Format(s.to_string());
    if bytes.len() < 12 {
        return Err(fmt("truncated header"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt("magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + mlen).ok_or_else(|| fmt("truncated manifest"))?;
    let manifest: Vec<Entry> =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let data = &bytes[12 + mlen..];
    if data.len() % 4 != 0 {
        return Err(fmt("data section is not a whole number of floats"));
    }
    let floats = data.len() / 4;

    let mut targets = params.tensors_mut();
    if targets.len() != manifest.len() {
        return Err(CheckpointError::Format(format!(
            "{} tensors stored, {} expected",
            manifest.len(),
            targets.len()
        )));
    }
    for (name, t) in targets.iter_mut() {
        let e = manifest
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                detail: "missing".into(),
            })?;
        if e.shape != t.shape() {
            return Err(CheckpointError::Tensor {
                name: name.clone(),
                detail: format!("shape {:?}, expected {:?}", e.shape, t.shape()),
            });
        }
        if e.offset + t.len() > floats {
            return Err(CheckpointError::Tensor {
                name: name.clone(),
                detail: "data out of range".into(),
            });
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let at = 4 * (e.offset + i);
            *v = f32::from_le_bytes(data[at..at + 4].try_into().unwrap()) as f64;
        }
    }
    Ok(())
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(path: &Path, params: &impl Params) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(params))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint_into(path: &Path, params: &mut impl Params) -> Result<(), CheckpointError> {
    decode_checkpoint_into(&std::fs::read(path)?, params)
}

/// Rounds every parameter to f32 precision, matching what a save/load round trip produces.
pub fn round_to_f32(params: &mut impl Params) {
    for (_, t) in params.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
