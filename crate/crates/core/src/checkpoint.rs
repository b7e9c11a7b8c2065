//! Binary model checkpoints.
//!
//! Layout: the magic `TPCK`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a JSON header and a payload of
//! little-endian `f32` values (extractor parameters, then classifier rows).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CosineClassifier, ExtractorConfig, ExtractorParams, SegmentationModel};

pub const MAGIC: &[u8; 4] = b"TPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dim: usize,
    pub classes: usize,
    pub margin: f64,
    pub scale: f64,
    pub extractor: ExtractorConfig,
    pub layer_shapes: Vec<[usize; 2]>,
    pub class_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub payload_len: usize,
}

impl CheckpointHeader {
    fn of(model: &SegmentationModel) -> Self {
        let head = &model.head;
        let cfg = *model.extractor.config();
        Self {
            format_version: FORMAT_VERSION,
            dim: head.dim(),
            classes: head.class_count(),
            margin: head.margin(),
            scale: head.scale(),
            extractor: cfg,
            layer_shapes: cfg.layer_shapes().iter().map(|&(o, i)| [o, i]).collect(),
            class_names: head.class_names().to_vec(),
            parents: head.parents().to_vec(),
            payload_len: cfg.param_count() + head.weights().len(),
        }
    }
}

pub fn to_bytes(model: &SegmentationModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader::of(model))?;
    let values = model.extractor.values().iter().chain(model.head.weights());
    let mut out = Vec::with_capacity(12 + header.len() + 4 * (model.extractor.values().len() + model.head.weights().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| corrupt("truncated preamble"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<SegmentationModel> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg = header.extractor;
    let shapes: Vec<[usize; 2]> = cfg.layer_shapes().iter().map(|&(o, i)| [o, i]).collect();
    if shapes != header.layer_shapes || header.dim != cfg.dim {
        return Err(corrupt("layer shapes disagree with extractor config"));
    }
    let expected = cfg.param_count() + header.classes * header.dim;
    if header.payload_len != expected || header.class_names.len() != header.classes {
        return Err(corrupt("header sizes are inconsistent"));
    }
    let payload = &body[header_len..];
    if payload.len() != 4 * expected {
        return Err(corrupt(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * expected
        )));
    }
    let mut values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    let weights = values.split_off(cfg.param_count());
    let extractor = ExtractorParams::from_values(cfg, values).map_err(|e| corrupt(e.to_string()))?;
    let head = CosineClassifier::new(
        header.dim,
        weights,
        header.margin,
        header.scale,
        header.class_names,
        header.parents,
    )
    .map_err(|e| corrupt(e.to_string()))?;
    Ok(SegmentationModel { extractor, head })
}

pub fn checkpoint_save(model: &SegmentationModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<SegmentationModel> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
