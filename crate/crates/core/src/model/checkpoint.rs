//! Binary checkpoints: magic bytes, a length-prefixed JSON header, then raw
//! little-endian `f32` tensor data in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{HyperParams, ModelConfig, ModelParameters};

pub const MAGIC: &[u8; 8] = b"DGLSTM01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint schema version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub hyperparams: HyperParams,
    pub config: ModelConfig,
    pub seed: u64,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub hyperparams: HyperParams,
    pub epoch: usize,
    pub params: ModelParameters<f32>,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    params: &ModelParameters<f32>,
    hyperparams: &HyperParams,
    epoch: usize,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, value) in params.names().iter().zip(params.values()) {
        let (r, c) = value.dim();
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [r, c],
            offset,
        });
        offset += 4 * value.len();
    }
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        hyperparams: *hyperparams,
        config: params.config,
        seed: hyperparams.seed,
        epoch,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut data = Vec::with_capacity(offset);
    for value in params.values() {
        for v in value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| CheckpointError::Header("header length overflow".into()))?;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::Version(header.schema_version));
    }
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let [r, c] = entry.shape;
        let end = entry.offset + 4 * r * c;
        let bytes = data
            .get(entry.offset..end)
            .ok_or_else(|| CheckpointError::Header(format!("tensor {} truncated", entry.name)))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let array = Array2::from_shape_vec((r, c), values)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push((entry.name.clone(), array));
    }
    let params =
        ModelParameters::from_tensors(header.config, tensors).map_err(CheckpointError::Header)?;
    Ok(Checkpoint {
        hyperparams: header.hyperparams,
        epoch: header.epoch,
        params,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParameters<f32>,
    hyperparams: &HyperParams,
    epoch: usize,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_checkpoint(BufWriter::new(File::create(path)?), params, hyperparams, epoch)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
