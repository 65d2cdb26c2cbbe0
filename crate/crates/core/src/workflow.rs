//! The image-level operations shared by the command line and the service:
//! drawing a sample, sweeping component scales, slerp grids and edits.

use nalgebra::DVector;

use crate::data::ImageShape;
use crate::edits::{propagate_edits, PixelEdit};
use crate::error::{Error, Result};
use crate::lowrank::{slerp, LowRankGaussian, ObservationNoise, DEFAULT_EDIT_LIMIT};
use crate::models::Model;
use crate::random::seeded;

/// Scale factors from −5 to +5 in steps of 0.5.
pub fn default_scales() -> Vec<f64> {
    (-10..=10).map(|i| i as f64 * 0.5).collect()
}

/// One generated image: the decoded distribution and the auxiliary noise
/// that realises its sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub dist: LowRankGaussian,
    pub noise: ObservationNoise,
}

impl Draw {
    /// Latent draw first, then `ω_p` and `ω_d`, all from one stream seeded by `seed`.
    pub fn new(model: &Model, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let dist = model.generate(&mut rng)?;
        let noise = ObservationNoise::standard(&mut rng, dist.dim(), dist.rank());
        Ok(Self { dist, noise })
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.dist.mu()
    }

    pub fn sample(&self) -> Result<DVector<f64>> {
        self.dist.sample(&self.noise)
    }

    /// The sample after `scale_components(coefficients)`, same noise.
    pub fn scaled_sample(&self, coefficients: &[f64]) -> Result<DVector<f64>> {
        self.dist.scale_components(coefficients)?.sample(&self.noise)
    }

    /// `rows[c][j]` scales component `c` by `scales[j]`, others by one.
    pub fn scale_sweep(&self, components: &[usize], scales: &[f64]) -> Result<Vec<Vec<DVector<f64>>>> {
        let rank = self.dist.rank();
        components
            .iter()
            .map(|&c| {
                if c >= rank {
                    return Err(Error::InvalidArgument(format!("component {c} out of range for rank {rank}")));
                }
                scales
                    .iter()
                    .map(|&s| {
                        let mut coeffs = vec![1.0; rank];
                        coeffs[c] = s;
                        self.scaled_sample(&coeffs)
                    })
                    .collect()
            })
            .collect()
    }

    /// Propagate pixel edits into `current` under this draw's covariance.
    pub fn edit(&self, current: &DVector<f64>, edits: &[PixelEdit], shape: ImageShape) -> Result<DVector<f64>> {
        propagate_edits(&self.dist, current, edits, shape, DEFAULT_EDIT_LIMIT)
    }
}

/// A `steps × steps` grid, row-major. The decoded distribution comes from
/// `seed` and its own noise is the top-left corner; the other three corners
/// take `ω_p` from seeds `seed + 1 ..= seed + 3` and share its `ω_d`. Rows slerp between the left and
/// right edges, which slerp top to bottom.
#[derive(Debug, Clone)]
pub struct SlerpGrid {
    pub draw: Draw,
    pub corners: [ObservationNoise; 4],
    pub cells: Vec<ObservationNoise>,
    pub steps: usize,
}

impl SlerpGrid {
    pub fn new(model: &Model, seed: u64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let draw = Draw::new(model, seed)?;
        let rank = draw.dist.rank();
        let omega_d = draw.noise.omega_d.clone();
        let corner = |k: u64| {
            let mut rng = seeded(seed.wrapping_add(k));
            let omega_p = crate::random::standard_normal_vector(&mut rng, rank);
            ObservationNoise::new(omega_p, omega_d.clone())
        };
        let corners = [draw.noise.clone(), corner(1), corner(2), corner(3)];
        let t = |i: usize| i as f64 / (steps - 1) as f64;
        let mut cells = Vec::with_capacity(steps * steps);
        for row in 0..steps {
            let left = slerp(&corners[0].omega_p, &corners[2].omega_p, t(row))?;
            let right = slerp(&corners[1].omega_p, &corners[3].omega_p, t(row))?;
            for col in 0..steps {
                let omega_p = if col == 0 {
                    left.clone()
                } else if col == steps - 1 {
                    right.clone()
                } else {
                    slerp(&left, &right, t(col))?
                };
                cells.push(ObservationNoise::new(omega_p, omega_d.clone()));
            }
        }
        Ok(Self {
            draw,
            corners,
            cells,
            steps,
        })
    }

    pub fn images(&self) -> Result<Vec<DVector<f64>>> {
        self.cells.iter().map(|n| self.draw.dist.sample(n)).collect()
    }
}
