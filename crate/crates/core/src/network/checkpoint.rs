//! Checkpoint archive.
//!
//! ```text
//! "ZSLC" | u32 version=1 | u32 header_len | header JSON (UTF-8)
//! u32 tensor_count | tensor_count × ( u64 blob_len | ZSLF blob )
//! ```
//!
//! Each blob is a one-record ZSLF table whose id is the tensor name and whose
//! vector is the row-major flattened tensor. Shapes live in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::dataset::FeatureTable;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZSLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub label_order: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let ids = model.all_params();
    let header = CheckpointHeader {
        arch: model.config.clone(),
        label_order: model.label_order.clone(),
        tensors: ids
            .iter()
            .map(|&id| TensorEntry {
                name: id.name(),
                shape: model.param_shape(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let blob =
            FeatureTable::from_records(model.param(id).len(), [(id.name(), model.param(id))])?
                .to_bytes()?;
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt(format!("checkpoint truncated at offset {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

pub fn read_checkpoint_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = read_u32(bytes, &mut pos)? as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut pos, len)?)?;
    Ok((header, pos))
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let (header, mut pos) = read_checkpoint_header(bytes)?;
    let mut model = Model::<f32>::zeroed(&header.arch, header.label_order.clone())?;
    let ids = model.all_params();
    let count = read_u32(bytes, &mut pos)? as usize;
    if count != ids.len() || header.tensors.len() != ids.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            ids.len()
        )));
    }
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let (name, shape) = (id.name(), model.param_shape(id));
        if entry.name != name || entry.shape != shape {
            return Err(Error::Mismatch(format!(
                "tensor {} {:?} does not match architecture tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
        let table = FeatureTable::from_bytes(take(bytes, &mut pos, len)?)?;
        let values = table
            .get(&name)
            .filter(|_| table.len() == 1)
            .ok_or_else(|| Error::Mismatch(format!("blob for {name} is malformed")))?;
        let dst = model.param_mut(id);
        if dst.len() != values.len() {
            return Err(Error::Mismatch(format!("tensor {name} has wrong length")));
        }
        dst.copy_from_slice(values);
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(
            "trailing bytes after checkpoint tensors".into(),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    model_from_checkpoint_bytes(&fs::read(path)?)
}
