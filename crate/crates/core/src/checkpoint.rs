//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SOSVCKPT" | u32 version | u64 header length | header JSON
//! u64 length | low-rank Gaussian block
//! u32 block count | per block: u32 name length, name, u64 count, f64 values
//! ```
//!
//! The Gaussian block holds the fitted distribution for the
//! distribution-only model and the decoder output at `z = 0` for the VAE,
//! so consumers can read it without rebuilding the network.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constrained::{LagrangianState, OptimizerKind, OptimizerState};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::lowrank::{read_f64s, read_u64, LowRankGaussian};
use crate::models::{DistOnlyModel, FreezeState, Model, VaeModel};
use crate::random::RngState;
use crate::trainer::{dist_config, vae_config, ModelKind, TrainConfig};

pub const MAGIC: &[u8; 8] = b"SOSVCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "optimizer.m";
const MOMENT_V: &str = "optimizer.v";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: TrainConfig,
    pub config_hash: String,
    pub image_shape: ImageShape,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub lagrangian: LagrangianState,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub freeze: FreezeState,
}

impl CheckpointHeader {
    pub fn new(
        config: TrainConfig,
        image_shape: ImageShape,
        epoch: usize,
        step: u64,
        rng: RngState,
        lagrangian: LagrangianState,
        optimizer: &OptimizerState,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_kind: config.model,
            config_hash: config.hash(),
            config,
            image_shape,
            epoch,
            step,
            rng,
            lagrangian,
            optimizer: optimizer.kind,
            optimizer_step: optimizer.step,
            freeze: FreezeState::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// The distribution stored alongside the parameters.
    pub fn summary_distribution(&self) -> Result<LowRankGaussian> {
        match &self.model {
            Model::Vae(m) => m.decode(&DVector::zeros(m.config().latent_dim)),
            Model::DistOnly(m) => m.dist(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = self.header.clone();
        if let Model::Vae(m) = &self.model {
            header.freeze = m.freeze();
        }
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;

        let dist = self.summary_distribution()?.to_bytes();
        w.write_all(&(dist.len() as u64).to_le_bytes())?;
        w.write_all(&dist)?;

        let params = self.model.params();
        let mut blocks: Vec<(&str, &[f64])> = self
            .model
            .layout()
            .blocks()
            .iter()
            .map(|b| (b.name.as_str(), &params[b.range()]))
            .collect();
        blocks.push((MOMENT_M, &self.optimizer.m));
        blocks.push((MOMENT_V, &self.optimizer.v));
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, values) in blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = bounded_len(read_u64(&mut r)?)?;
        let mut json = vec![0u8; header_len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;

        let dist_len = bounded_len(read_u64(&mut r)?)?;
        let mut dist = vec![0u8; dist_len];
        r.read_exact(&mut dist)?;
        LowRankGaussian::from_bytes(&dist)?;

        let n_blocks = read_u32(&mut r)? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let count = bounded_len(read_u64(&mut r)?)?;
            blocks.push((name, read_f64s(&mut r, count)?));
        }
        let mut take = |name: &str| -> Result<Vec<f64>> {
            let pos = blocks
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing block {name}")))?;
            Ok(blocks.swap_remove(pos).1)
        };

        let dim = header.image_shape.size();
        let mut model = match header.model_kind {
            ModelKind::Vae => Model::Vae(VaeModel::zeroed(vae_config(&header.config, dim))?),
            ModelKind::DistOnly => Model::DistOnly(DistOnlyModel::zeroed(dist_config(&header.config, dim))?),
        };
        let mut params = vec![0.0; model.layout().len()];
        for b in model.layout().blocks() {
            let values = take(&b.name)?;
            if values.len() != b.len() {
                return Err(Error::Format(format!(
                    "block {} has {} values, expected {}",
                    b.name,
                    values.len(),
                    b.len()
                )));
            }
            params[b.range()].copy_from_slice(&values);
        }
        model = match model {
            Model::Vae(m) => Model::Vae(VaeModel::from_parts(m.config().clone(), params, header.freeze)?),
            Model::DistOnly(m) => Model::DistOnly(DistOnlyModel::from_parts(m.config().clone(), params)?),
        };
        let mut optimizer = OptimizerState::new(header.optimizer, model.layout().len());
        optimizer.step = header.optimizer_step;
        optimizer.m = take(MOMENT_M)?;
        optimizer.v = take(MOMENT_V)?;
        if optimizer.m.len() != optimizer.v.len()
            || (matches!(header.optimizer, OptimizerKind::Adam(_)) && optimizer.m.len() != model.layout().len())
        {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        Ok(Self {
            header,
            model,
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn bounded_len(n: u64) -> Result<usize> {
    const MAX: u64 = 1 << 34;
    if n > MAX {
        return Err(Error::Format(format!("implausible length {n}")));
    }
    Ok(n as usize)
}
