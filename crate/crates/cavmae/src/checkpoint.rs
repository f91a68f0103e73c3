//! Checkpoint container (`.cavc`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAVC" | version u32 | meta_len u32 | meta (JSON text)
//! then named tensors until end of file:
//!   name_len u16 | name bytes | rank u8 | dims u32 × rank | data f32 LE
//! ```
//!
//! Tensors are written in sorted name order (the parameter map is ordered),
//! so identical parameters always serialize to identical bytes. Metadata is
//! re-serialized from the parsed struct on write, so write → read → write is
//! byte-identical.

use std::path::Path;

use cavmae_core::loss::LossConfig;
use cavmae_core::model::{
    ClassifierFeature, ModalityMode, ModelDims, ParamMap, TokenGeometry, Variant,
};
use cavmae_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CAVC";
pub const VERSION: u32 = 1;

/// Classifier-head details carried by finetuned / probed checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub modality: ModalityMode,
    pub feature: ClassifierFeature,
    pub n_classes: usize,
}

/// Everything needed to rebuild the model around the stored tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub dims: ModelDims,
    pub geo: TokenGeometry,
    pub loss: LossConfig,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadMeta>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::runtime(format!("checkpoint container: {}", msg.into()))
}

/// Serializes metadata + parameters to checkpoint bytes.
pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ParamMap) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for (name, tensor) in params {
        if name.len() > u16::MAX as usize {
            return Err(corrupt(format!("parameter name too long: {name}")));
        }
        if tensor.shape().len() > u8::MAX as usize {
            return Err(corrupt(format!("parameter rank too high: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes; tensors are read until end of file.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamMap)> {
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > bytes.len() {
            Err(corrupt(format!(
                "truncated: wanted {n} bytes at offset {pos}, file has {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    if &bytes[0..4] != MAGIC {
        return Err(corrupt(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12, meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len])
        .map_err(|e| corrupt(format!("bad metadata JSON: {e}")))?;
    let mut pos = 12 + meta_len;
    let mut params = ParamMap::new();
    while pos < bytes.len() {
        need(pos, 2)?;
        let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        need(pos, name_len)?;
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| corrupt("parameter name is not UTF-8"))?
            .to_string();
        pos += name_len;
        need(pos, 1)?;
        let rank = bytes[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            need(pos, 4)?;
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let numel: usize = shape.iter().product();
        need(pos, 4 * numel)?;
        let data: Vec<f64> = bytes[pos..pos + 4 * numel]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        pos += 4 * numel;
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(corrupt(format!("duplicate parameter '{name}'")));
        }
    }
    Ok((meta, params))
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamMap) -> Result<()> {
    crate::run::atomic_write(path, &encode_checkpoint(meta, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamMap)> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::runtime(format!("cannot read checkpoint '{}': {e}", path.display()))
    })?;
    decode_checkpoint(&bytes)
}
