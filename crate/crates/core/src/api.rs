//! JSON bodies of the editing service. Float arrays travel as base64 of
//! little-endian `f64`, row-major over `(y, x, c)`; previews as base64 PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::edits::PixelEdit;
use crate::error::{Error, Result};

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidArgument(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_bytes(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_bytes(text: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidArgument(format!("bad base64: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub rank: usize,
    pub latent_dim: usize,
}

impl ModelInfo {
    pub fn of(ckpt: &Checkpoint) -> Self {
        let shape = ckpt.header.image_shape;
        Self {
            width: shape.width,
            height: shape.height,
            channels: shape.channels,
            rank: ckpt.model.rank(),
            latent_dim: ckpt.model.latent_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub session_id: String,
    pub mean: String,
    pub sample: String,
    pub mean_png: String,
    pub sample_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleRequest {
    pub session_id: String,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleResponse {
    pub sample: String,
    pub sample_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub session_id: String,
    #[serde(default)]
    pub edits: Vec<PixelEdit>,
    /// Restore the original sample before applying `edits`.
    #[serde(default)]
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditResponse {
    pub conditioned_image: String,
    pub conditioned_png: String,
}

/// Everything needed to recompute a session's sample by hand. `cov_factor`
/// is column-major `dim × rank`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDebug {
    pub dim: usize,
    pub rank: usize,
    pub mu: String,
    pub cov_factor: String,
    pub cov_diag: String,
    pub omega_p: String,
    pub omega_d: String,
    pub current: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
