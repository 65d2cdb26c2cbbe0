//! Helpers for driving the `sosvae` binary from tests.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use nalgebra::{DMatrix, DVector};
use sosvae::checkpoint::Checkpoint;
use sosvae::data::{synthetic_lowrank, ImageShape};
use sosvae::models::{DistOnlyModel, Model};
use sosvae::trainer::{ModelKind, TrainConfig, Trainer};
use sosvae::LowRankGaussian;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sosvae")
}

pub fn sosvae(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn ok(args: &[&str]) -> Output {
    let out = sosvae(args);
    assert_eq!(code(&out), 0, "sosvae {args:?} failed: {}", stderr(&out));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small VAE run file on 8x8 blobs.
pub fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        r#"[data]
source = "blobs"
width = 8
height = 8
count = 96
pixel_noise = 0.02
seed = 1

[train]
latent_dim = 4
rank = 3
hidden = [24]
epochs = {epochs}
batch_size = 16
seed = 3
freeze_fraction = 0.25
epsilon_mode = false
lr = 1e-3
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Train through the binary and return the checkpoint path.
pub fn trained(dir: &Path, epochs: usize) -> PathBuf {
    let config = small_config(dir, epochs);
    let out = dir.join("small.ckpt");
    ok(&["train", "--config", s(&config), "--out", s(&out), "--log", s(&dir.join("small.csv"))]);
    out
}

/// Save a distribution-only checkpoint holding exactly `dist`, shaped as `shape`.
pub fn dist_checkpoint(dir: &Path, dist: &LowRankGaussian, shape: ImageShape, epsilon_mode: bool) -> PathBuf {
    let (data, _) = synthetic_lowrank(dist.dim(), dist.rank().max(1), 0, 4).unwrap();
    let config = TrainConfig {
        model: ModelKind::DistOnly,
        rank: dist.rank(),
        epsilon_mode,
        ..TrainConfig::default()
    };
    let mut ckpt: Checkpoint = Trainer::new(config, &data).unwrap().checkpoint();
    ckpt.model = Model::DistOnly(DistOnlyModel::from_distribution(dist, epsilon_mode, 1e-5).unwrap());
    ckpt.header.image_shape = shape;
    let path = dir.join(format!("dist_r{}.ckpt", dist.rank()));
    ckpt.save(&path).unwrap();
    path
}

pub fn smooth_dist(w: usize, h: usize, rank: usize) -> LowRankGaussian {
    let s = w * h;
    LowRankGaussian::new(
        DVector::from_fn(s, |i, _| 0.3 + 0.4 * (i as f64 / s as f64)),
        DMatrix::from_fn(s, rank, |i, r| 0.08 * ((i as f64 * 0.7 + r as f64 * 1.3).sin())),
        DVector::from_fn(s, |i, _| 0.001 + 0.0005 * ((i % 3) as f64)),
    )
    .unwrap()
}

pub fn gray(path: &Path) -> (Vec<u8>, ImageShape) {
    let img = image::open(path).unwrap().to_luma8();
    let shape = ImageShape::grayscale(img.width() as usize, img.height() as usize);
    (img.into_raw(), shape)
}

pub fn bytes_of(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| sosvae::render::to_byte(v)).collect()
}

/// `sosvae serve` on an ephemeral port; killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
}

impl Server {
    pub fn start(checkpoint: &Path) -> Self {
        let mut child = Command::new(bin())
            .args(["serve", "--checkpoint", s(checkpoint), "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Self { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
