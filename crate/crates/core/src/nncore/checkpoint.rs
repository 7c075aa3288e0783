//! `model.json` + `model.bin` parameter checkpoints.
//!
//! The JSON header lists every parameter in name order with its shape and
//! byte offset; the binary file is those tensors as little-endian f32,
//! concatenated in the same order.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::jsonio;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "frostmil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, params: &ParamSet<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bin.len(),
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: serde_json::to_value(config).map_err(|source| Error::Json {
            context: "checkpoint config".into(),
            source,
        })?,
        params: entries,
    };
    jsonio::write_sorted(&header, &dir.join("model.json"))?;
    let bin_path = dir.join("model.bin");
    std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(serde_json::Value, ParamSet<f32>)> {
    let header: CheckpointHeader = jsonio::read(&dir.join("model.json"))?;
    let bin_path = dir.join("model.bin");
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: dir.join("model.json"),
            message: format!("unexpected format tag {:?}", header.format),
        });
    }
    let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut params = ParamSet::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bin.len() {
            return Err(Error::Format {
                path: bin_path,
                message: format!("parameter {} overruns the file", e.name),
            });
        }
        let data = bin[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((header.config, params))
}
