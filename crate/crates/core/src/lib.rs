//! Structured observation-space models: a low-rank multivariate normal over
//! flattened images, the constrained trainer that fits it (directly or as the
//! output of a small VAE decoder), and the sampling, interpolation, component
//! scaling and conditional-editing tools built on top.

pub mod api;
pub mod checkpoint;
pub mod constrained;
pub mod data;
pub mod edits;
pub mod error;
pub mod lowrank;
pub mod models;
pub mod nn;
pub mod random;
pub mod render;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
pub use lowrank::{CapacitanceCache, LowRankGaussian, ObservationNoise};
