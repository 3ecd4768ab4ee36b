//! Parameter checkpoints: a flat file of little-endian `f64`s plus a JSON
//! sidecar mapping each parameter name to its offset (in elements) and shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{AutodiffError, ParamStore, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    total: usize,
    params: Vec<CheckpointEntry>,
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(params: &ParamStore, dir: &Path, stem: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.total_len() * 8);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            offset,
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    let sidecar = Sidecar {
        dtype: "f64-le".into(),
        total: offset,
        params: entries,
    };
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Reads a checkpoint back into a fresh store, preserving parameter order.
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamStore> {
    let sidecar: Sidecar =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    if bytes.len() != sidecar.total * 8 {
        return Err(AutodiffError::Checkpoint(format!(
            "expected {} bytes, found {}",
            sidecar.total * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::new();
    for e in sidecar.params {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len;
        if end > values.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter {} overruns data",
                e.name
            )));
        }
        store.insert(e.name, Tensor::new(&e.shape, values[e.offset..end].to_vec())?);
    }
    Ok(store)
}
