use std::path::{Path, PathBuf};

use serde::Deserialize;

use sosvae::data::{load_directory, synthetic_blobs, synthetic_lowrank, BlobSpec, Dataset};
use sosvae::trainer::TrainConfig;

use crate::CliError;

/// A TOML run file: `[data]`, `[train]` and `[output]` tables, all optional.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        width: usize,
        height: usize,
        count: usize,
        #[serde(default)]
        pixel_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// PNG files; `dir` is relative to the config file.
    Directory {
        dir: PathBuf,
        width: Option<usize>,
        height: Option<usize>,
        #[serde(default = "yes")]
        grayscale: bool,
    },
    /// Samples of a random low-rank Gaussian, laid out as a `dim × 1` image.
    Lowrank {
        dim: usize,
        rank: usize,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs {
            width: 16,
            height: 16,
            count: 2000,
            pixel_noise: 0.05,
            seed: 5,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataConfig::Blobs {
                width,
                height,
                count,
                pixel_noise,
                seed,
            } => {
                let spec = BlobSpec {
                    width: *width,
                    height: *height,
                    count: *count,
                    pixel_noise: *pixel_noise,
                };
                synthetic_blobs(&spec, *seed).map_err(CliError::usage)
            }
            DataConfig::Directory {
                dir,
                width,
                height,
                grayscale,
            } => {
                if !dir.is_dir() {
                    return Err(CliError::Usage(format!("data directory {} does not exist", dir.display())));
                }
                let target = match (width, height) {
                    (Some(w), Some(h)) => Some((*w, *h)),
                    (None, None) => None,
                    _ => return Err(CliError::Usage("give both data.width and data.height or neither".into())),
                };
                load_directory(dir, target, *grayscale).map_err(CliError::usage)
            }
            DataConfig::Lowrank { dim, rank, count, seed } => {
                synthetic_lowrank(*dim, *rank, *seed, *count).map(|(d, _)| d).map_err(CliError::usage)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train_log.csv"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    /// Parse `path`; a relative data directory is resolved against the
    /// file's own directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let DataConfig::Directory { dir, .. } = &mut config.data {
            if dir.is_relative() {
                *dir = path.parent().unwrap_or(Path::new(".")).join(&*dir);
            }
        }
        Ok(config)
    }
}
