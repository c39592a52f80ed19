//! On-disk checkpoints: `params.bin` (flat little-endian f32 blob),
//! `params.index.json` (name to offset/shape) and `model.json`.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use scl_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclError};

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const INDEX_FILE: &str = "params.index.json";
pub const MODEL_FILE: &str = "model.json";
const MAGIC: &[u8; 4] = b"SCLP";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    /// Offset in values (not bytes) from the start of the value section.
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamIndex {
    pub format_version: u32,
    pub params: Vec<IndexEntry>,
}

pub fn write_params(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
    let total = store.num_elements();
    let mut blob = Vec::with_capacity(HEADER_LEN + 4 * total);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(total as u64).to_le_bytes());
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let value = store.get(id);
        params.push(IndexEntry {
            name: store.name(id).to_string(),
            offset,
            shape: value.shape().to_vec(),
        });
        for &v in value.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += value.len();
    }
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, blob).map_err(|e| SclError::io(&bin, e))?;
    let index = ParamIndex {
        format_version: FORMAT_VERSION,
        params,
    };
    let idx = dir.join(INDEX_FILE);
    fs::write(&idx, serde_json::to_string_pretty(&index)?).map_err(|e| SclError::io(&idx, e))
}

pub fn read_params(dir: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let bin = dir.join(PARAMS_FILE);
    let idx = dir.join(INDEX_FILE);
    let blob = fs::read(&bin).map_err(|e| SclError::io(&bin, e))?;
    let text = fs::read_to_string(&idx).map_err(|e| SclError::io(&idx, e))?;
    let index: ParamIndex = serde_json::from_str(&text).map_err(|e| SclError::Format(format!("{}: {e}", idx.display())))?;
    if blob.len() < HEADER_LEN || &blob[..4] != MAGIC {
        return Err(SclError::Format(format!("{} is not a parameter blob", bin.display())));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION || index.format_version != FORMAT_VERSION {
        return Err(SclError::Format(format!(
            "unsupported checkpoint version {version} (index {}), expected {FORMAT_VERSION}",
            index.format_version
        )));
    }
    let count = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
    if blob.len() != HEADER_LEN + 4 * count {
        return Err(SclError::Format(format!("{} is truncated", bin.display())));
    }
    let values = &blob[HEADER_LEN..];
    index
        .params
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            if e.offset + n > count {
                return Err(SclError::Format(format!("parameter `{}` lies outside the blob", e.name)));
            }
            let data = values[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let arr = ArrayD::from_shape_vec(e.shape, data).expect("size checked");
            Ok((e.name, arr))
        })
        .collect()
}

/// Overwrites every parameter of `store` from a checkpoint directory.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let loaded = read_params(dir)?;
    if loaded.len() != store.len() {
        return Err(SclError::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, value) in loaded {
        let id = store
            .id(&name)
            .ok_or_else(|| SclError::Format(format!("checkpoint parameter `{name}` is not part of the model")))?;
        if store.get(id).shape() != value.shape() {
            return Err(SclError::Shape {
                expected: format!("{:?} for `{name}`", store.get(id).shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}
