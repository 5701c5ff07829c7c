//! Model artifact container.
//!
//! Layout (little-endian): magic `BIFM`, `u32` format version, `u64` header
//! length, a JSON header with the architecture, normalization statistics,
//! loss curve, config hash and parameter count, then every parameter as
//! `f32` in [`SegmenterModel::params_mut`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, NormStats, SegmenterModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"BIFM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    norm: NormStats,
    loss_curve: Vec<f32>,
    config_hash: u64,
    param_count: usize,
}

pub fn write_model(mut out: impl Write, model: &SegmenterModel) -> Result<()> {
    let header = Header {
        arch: model.arch().clone(),
        norm: model.norm(),
        loss_curve: model.loss_curve().to_vec(),
        config_hash: model.config_hash(),
        param_count: model.param_count(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut copy = model.clone();
    let mut bytes = Vec::with_capacity(model.param_count() * 4);
    for (_, tensor) in copy.params_mut() {
        for v in tensor.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_model(mut input: impl Read) -> Result<SegmenterModel> {
    let mut fixed = [0u8; 16];
    input
        .read_exact(&mut fixed)
        .map_err(|e| Error::format("model artifact", format!("truncated preamble: {e}")))?;
    if &fixed[..4] != MODEL_MAGIC {
        return Err(Error::format("model artifact", "bad magic"));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format("model artifact", format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap());
    if header_len > 1 << 24 {
        return Err(Error::format("model artifact", "header too large"));
    }
    let mut json = vec![0u8; header_len as usize];
    input
        .read_exact(&mut json)
        .map_err(|e| Error::format("model artifact", format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&json)?;
    header.arch.validate()?;
    if header.arch.config_hash() != header.config_hash {
        return Err(Error::format("model artifact", "config hash does not match the architecture"));
    }
    let mut model = SegmenterModel::<f32>::init(&header.arch, header.norm, 0)?;
    if model.param_count() != header.param_count {
        return Err(Error::format("model artifact", "parameter count does not match the architecture"));
    }
    let mut bytes = vec![0u8; header.param_count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::format("model artifact", format!("truncated parameters: {e}")))?;
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for (_, tensor) in model.params_mut() {
        for v in tensor.iter_mut() {
            *v = values.next().expect("sized from param count");
            if !v.is_finite() {
                return Err(Error::NonFinite("model parameter".into()));
            }
        }
    }
    model.set_loss_curve(header.loss_curve);
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &SegmenterModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SegmenterModel> {
    read_model(BufReader::new(File::open(path)?))
}
