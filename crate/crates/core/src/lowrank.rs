//! Multivariate normal over flattened images with covariance `P Pᵀ + diag(d)`.
//!
//! `P` is an `S × R` factor with `R` much smaller than `S`. Nothing in here
//! materialises an `S × S` matrix: inverses go through the Woodbury identity
//! on the `R × R` capacitance matrix `I + Pᵀ D⁻¹ P`, determinants through the
//! matrix determinant lemma. Every operation is a pure function of its inputs.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest number of edited pixels `condition_on_edit` accepts by default.
pub const DEFAULT_EDIT_LIMIT: usize = 4096;

/// Low-rank-plus-diagonal multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGaussian {
    mu: DVector<f64>,
    cov_factor: DMatrix<f64>,
    cov_diag: DVector<f64>,
}

/// Quantities shared by every Woodbury evaluation of one distribution.
#[derive(Debug, Clone)]
pub struct CapacitanceCache {
    /// `I_R + Pᵀ D⁻¹ P`.
    pub m: DMatrix<f64>,
    pub chol_m: Cholesky<f64, Dyn>,
    /// `log det Σ = log det m + Σᵢ log dᵢ`.
    pub logdet_sigma: f64,
    /// `D⁻¹ P`, kept because every solve needs it.
    scaled_factor: DMatrix<f64>,
}

impl CapacitanceCache {
    /// `Σ⁻¹ v` via Woodbury: `D⁻¹v − D⁻¹P m⁻¹ Pᵀ D⁻¹ v`.
    fn solve(&self, dist: &LowRankGaussian, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.component_div(&dist.cov_diag);
        if dist.rank() > 0 {
            let proj = self.scaled_factor.tr_mul(v);
            let inner = self.chol_m.solve(&proj);
            out.gemv(-1.0, &self.scaled_factor, &inner, 1.0);
        }
        out
    }

    /// `Σ⁻¹ P`, which simplifies to `D⁻¹ P m⁻¹` because `Pᵀ D⁻¹ P = m − I`.
    fn inv_sigma_factor(&self) -> DMatrix<f64> {
        if self.scaled_factor.ncols() == 0 {
            return self.scaled_factor.clone();
        }
        self.chol_m.solve(&self.scaled_factor.transpose()).transpose()
    }

    /// Diagonal of `Σ⁻¹` given `Σ⁻¹ P`.
    fn inv_sigma_diag(&self, dist: &LowRankGaussian, inv_sigma_factor: &DMatrix<f64>) -> DVector<f64> {
        let mut diag = dist.cov_diag.map(|d| d.recip());
        for (i, value) in diag.iter_mut().enumerate() {
            let correction = inv_sigma_factor.row(i).dot(&self.scaled_factor.row(i));
            *value -= correction;
        }
        diag
    }
}

/// Auxiliary standard-normal noise that turns a distribution into a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationNoise {
    pub omega_p: DVector<f64>,
    pub omega_d: DVector<f64>,
}

impl ObservationNoise {
    pub fn new(omega_p: DVector<f64>, omega_d: DVector<f64>) -> Self {
        Self { omega_p, omega_d }
    }

    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self::new(DVector::zeros(rank), DVector::zeros(dim))
    }

    pub fn standard<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize, rank: usize) -> Self {
        let omega_p = crate::random::standard_normal_vector(rng, rank);
        let omega_d = crate::random::standard_normal_vector(rng, dim);
        Self::new(omega_p, omega_d)
    }
}

/// Gradient of `log_prob` with respect to each parameter.
#[derive(Debug, Clone)]
pub struct LogProbGrad {
    pub mu: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
    pub cov_diag: DVector<f64>,
}

/// Gradient of the entropy. It does not depend on the mean.
#[derive(Debug, Clone)]
pub struct EntropyGrad {
    pub cov_factor: DMatrix<f64>,
    pub cov_diag: DVector<f64>,
}

/// Thin SVD `P = U diag(s) Vᵀ` in the canonical order and sign.
#[derive(Debug, Clone)]
pub struct FactorSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl LowRankGaussian {
    pub fn new(mu: DVector<f64>, cov_factor: DMatrix<f64>, cov_diag: DVector<f64>) -> Result<Self> {
        let dim = mu.len();
        if cov_factor.nrows() != dim {
            return Err(Error::dim("cov_factor rows", dim, cov_factor.nrows()));
        }
        if cov_diag.len() != dim {
            return Err(Error::dim("cov_diag", dim, cov_diag.len()));
        }
        if cov_factor.ncols() > dim {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds dimension {}",
                cov_factor.ncols(),
                dim
            )));
        }
        if !all_finite(mu.as_slice()) {
            return Err(Error::NonFinite("mu"));
        }
        if !all_finite(cov_factor.as_slice()) {
            return Err(Error::NonFinite("cov_factor"));
        }
        if !all_finite(cov_diag.as_slice()) {
            return Err(Error::NonFinite("cov_diag"));
        }
        if cov_diag.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidArgument("cov_diag must be strictly positive".into()));
        }
        Ok(Self {
            mu,
            cov_factor,
            cov_diag,
        })
    }

    /// `D = εI`.
    pub fn with_constant_diag(mu: DVector<f64>, cov_factor: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let diag = DVector::from_element(mu.len(), epsilon);
        Self::new(mu, cov_factor, diag)
    }

    pub fn diagonal(mu: DVector<f64>, cov_diag: DVector<f64>) -> Result<Self> {
        let factor = DMatrix::zeros(mu.len(), 0);
        Self::new(mu, factor, cov_diag)
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    pub fn cov_diag(&self) -> &DVector<f64> {
        &self.cov_diag
    }

    /// `S`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `R`.
    pub fn rank(&self) -> usize {
        self.cov_factor.ncols()
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mu: DVector<f64>) -> Result<Self> {
        Self::new(mu, self.cov_factor.clone(), self.cov_diag.clone())
    }

    /// Dense `P Pᵀ + diag(d)`. Quadratic in `S`; for small problems and tests.
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let mut sigma = &self.cov_factor * self.cov_factor.transpose();
        for i in 0..self.dim() {
            sigma[(i, i)] += self.cov_diag[i];
        }
        sigma
    }

    /// Diagonal of `Σ`: `dᵢ + ‖Pᵢ‖²`.
    pub fn marginal_variance(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            self.cov_diag[i] + self.cov_factor.row(i).norm_squared()
        })
    }

    pub fn build_cache(&self) -> Result<CapacitanceCache> {
        let rank = self.rank();
        let inv_d = self.cov_diag.map(|d| d.recip());
        let mut scaled_factor = self.cov_factor.clone();
        for (i, mut row) in scaled_factor.row_iter_mut().enumerate() {
            row *= inv_d[i];
        }
        let mut m = self.cov_factor.tr_mul(&scaled_factor);
        for r in 0..rank {
            m[(r, r)] += 1.0;
        }
        // Symmetrise away rounding so the factorisation sees an exact SPD input.
        let m = (&m + m.transpose()) * 0.5;
        let chol_m = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite("capacitance matrix"))?;
        let logdet_m: f64 = 2.0 * chol_m.l_dirty().diagonal().iter().map(|l| l.ln()).sum::<f64>();
        let logdet_d: f64 = self.cov_diag.iter().map(|d| d.ln()).sum();
        let logdet_sigma = logdet_m + logdet_d;
        if !logdet_sigma.is_finite() {
            return Err(Error::NonFinite("log det Σ"));
        }
        Ok(CapacitanceCache {
            m,
            chol_m,
            logdet_sigma,
            scaled_factor,
        })
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("observation", self.dim(), x.len()));
        }
        if !all_finite(x.as_slice()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    pub fn log_prob(&self, x: &DVector<f64>) -> Result<f64> {
        let cache = self.build_cache()?;
        self.log_prob_with(&cache, x)
    }

    pub fn log_prob_with(&self, cache: &CapacitanceCache, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        let residual = x - &self.mu;
        let alpha = cache.solve(self, &residual);
        let quad = residual.dot(&alpha);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + cache.logdet_sigma + quad))
    }

    /// `Σ⁻¹ v` without forming `Σ`.
    pub fn precision_mul(&self, cache: &CapacitanceCache, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::dim("vector", self.dim(), v.len()));
        }
        Ok(cache.solve(self, v))
    }

    /// Log density and its gradient in one pass.
    ///
    /// With `α = Σ⁻¹(x − μ)` the gradients are `∂μ = α`,
    /// `∂P = α (αᵀP) − Σ⁻¹P` and `∂dᵢ = ½(αᵢ² − (Σ⁻¹)ᵢᵢ)`.
    pub fn log_prob_grad(&self, x: &DVector<f64>) -> Result<(f64, LogProbGrad)> {
        let cache = self.build_cache()?;
        self.log_prob_grad_with(&cache, x)
    }

    pub fn log_prob_grad_with(&self, cache: &CapacitanceCache, x: &DVector<f64>) -> Result<(f64, LogProbGrad)> {
        self.check_point(x)?;
        let residual = x - &self.mu;
        let alpha = cache.solve(self, &residual);
        let quad = residual.dot(&alpha);
        let value = -0.5 * (self.dim() as f64 * LN_2PI + cache.logdet_sigma + quad);

        let inv_sigma_factor = cache.inv_sigma_factor();
        let inv_sigma_diag = cache.inv_sigma_diag(self, &inv_sigma_factor);

        let alpha_p = self.cov_factor.tr_mul(&alpha);
        let mut grad_factor = -inv_sigma_factor;
        grad_factor.ger(1.0, &alpha, &alpha_p, 1.0);

        let grad_diag = DVector::from_fn(self.dim(), |i, _| 0.5 * (alpha[i] * alpha[i] - inv_sigma_diag[i]));

        Ok((
            value,
            LogProbGrad {
                mu: alpha,
                cov_factor: grad_factor,
                cov_diag: grad_diag,
            },
        ))
    }

    pub fn entropy(&self) -> Result<f64> {
        let cache = self.build_cache()?;
        Ok(self.entropy_with(&cache))
    }

    /// `½ S (1 + ln 2π) + ½ log det Σ`.
    pub fn entropy_with(&self, cache: &CapacitanceCache) -> f64 {
        0.5 * self.dim() as f64 * (1.0 + LN_2PI) + 0.5 * cache.logdet_sigma
    }

    pub fn entropy_grad(&self) -> Result<EntropyGrad> {
        let cache = self.build_cache()?;
        Ok(self.entropy_grad_with(&cache))
    }

    /// `∂P = Σ⁻¹ P`, `∂dᵢ = ½ (Σ⁻¹)ᵢᵢ`.
    pub fn entropy_grad_with(&self, cache: &CapacitanceCache) -> EntropyGrad {
        let inv_sigma_factor = cache.inv_sigma_factor();
        let inv_sigma_diag = cache.inv_sigma_diag(self, &inv_sigma_factor);
        EntropyGrad {
            cov_factor: inv_sigma_factor,
            cov_diag: inv_sigma_diag * 0.5,
        }
    }

    /// `μ + P ω_p + √d ⊙ ω_d`.
    pub fn sample(&self, noise: &ObservationNoise) -> Result<DVector<f64>> {
        if noise.omega_p.len() != self.rank() {
            return Err(Error::dim("omega_p", self.rank(), noise.omega_p.len()));
        }
        if noise.omega_d.len() != self.dim() {
            return Err(Error::dim("omega_d", self.dim(), noise.omega_d.len()));
        }
        let mut y = self.mu.clone();
        if self.rank() > 0 {
            y.gemv(1.0, &self.cov_factor, &noise.omega_p, 1.0);
        }
        for i in 0..self.dim() {
            y[i] += self.cov_diag[i].sqrt() * noise.omega_d[i];
        }
        Ok(y)
    }

    /// Sample with `ω_p` slerped between the two noises and `ω_d` taken from `noise_a`.
    pub fn slerp_interpolate(
        &self,
        noise_a: &ObservationNoise,
        noise_b: &ObservationNoise,
        t: f64,
    ) -> Result<DVector<f64>> {
        let omega_p = slerp(&noise_a.omega_p, &noise_b.omega_p, t)?;
        let noise = ObservationNoise::new(omega_p, noise_a.omega_d.clone());
        self.sample(&noise)
    }

    /// Thin SVD of the covariance factor, singular values descending and the
    /// largest-magnitude entry of every left singular vector positive.
    pub fn principal_components(&self) -> Result<FactorSvd> {
        factor_svd(&self.cov_factor)
    }

    /// Replace `P = U S Vᵀ` by `U (S·diag(a)) Vᵀ`, computed as the update
    /// `P + U (S·diag(a − 1)) Vᵀ` so that unit coefficients leave `P` untouched.
    pub fn scale_components(&self, coefficients: &[f64]) -> Result<Self> {
        if coefficients.len() != self.rank() {
            return Err(Error::dim("scaling coefficients", self.rank(), coefficients.len()));
        }
        if !all_finite(coefficients) {
            return Err(Error::NonFinite("scaling coefficients"));
        }
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        let svd = self.principal_components()?;
        let mut us = svd.u.clone();
        for (r, mut col) in us.column_iter_mut().enumerate() {
            col *= svd.singular_values[r] * (coefficients[r] - 1.0);
        }
        let factor = &self.cov_factor + us * &svd.v_t;
        Self::new(self.mu.clone(), factor, self.cov_diag.clone())
    }

    /// Conditional mean of the pixels outside `edit_indices` given that the
    /// edited pixels take `edit_values`: `μ₁ + Σ₁₂ Σ₂₂⁻¹ (b − μ₂)`.
    ///
    /// The result lists the unedited pixels in ascending index order.
    pub fn condition_on_edit(&self, edit_indices: &[usize], edit_values: &[f64]) -> Result<DVector<f64>> {
        self.condition_on_edit_with_limit(edit_indices, edit_values, DEFAULT_EDIT_LIMIT)
    }

    pub fn condition_on_edit_with_limit(
        &self,
        edit_indices: &[usize],
        edit_values: &[f64],
        limit: usize,
    ) -> Result<DVector<f64>> {
        let shift = self.conditional_shift(edit_indices, edit_values, limit)?;
        let edited = edit_mask(self.dim(), edit_indices);
        let unedited: Vec<f64> = (0..self.dim())
            .filter(|&i| !edited[i])
            .map(|i| self.mu[i] + shift[i])
            .collect();
        Ok(DVector::from_vec(unedited))
    }

    /// Full image after an edit: edited pixels carry their values, the rest
    /// the conditional mean. An empty edit returns the mean unchanged.
    pub fn apply_edit(&self, edit_indices: &[usize], edit_values: &[f64], limit: usize) -> Result<DVector<f64>> {
        if edit_indices.is_empty() && edit_values.is_empty() {
            return Ok(self.mu.clone());
        }
        let shift = self.conditional_shift(edit_indices, edit_values, limit)?;
        let mut out = &self.mu + shift;
        for (&i, &b) in edit_indices.iter().zip(edit_values) {
            out[i] = b;
        }
        Ok(out)
    }

    /// `P P₂ᵀ Σ₂₂⁻¹ (b − μ₂)` over all pixels; only the unedited entries are
    /// meaningful as a conditional-mean shift.
    fn conditional_shift(&self, edit_indices: &[usize], edit_values: &[f64], limit: usize) -> Result<DVector<f64>> {
        let k = edit_indices.len();
        if edit_values.len() != k {
            return Err(Error::dim("edit values", k, edit_values.len()));
        }
        if k == 0 || k >= self.dim() {
            return Err(Error::InvalidArgument(format!(
                "edit must touch between 1 and {} pixels, got {k}",
                self.dim() - 1
            )));
        }
        if k > limit {
            return Err(Error::EditLimit { k, limit });
        }
        if !all_finite(edit_values) {
            return Err(Error::NonFinite("edit values"));
        }
        let mut seen = vec![false; self.dim()];
        for &i in edit_indices {
            if i >= self.dim() {
                return Err(Error::InvalidArgument(format!("edit index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("edit index {i} repeated")));
            }
        }

        let rank = self.rank();
        let edited_factor = DMatrix::from_fn(k, rank, |j, r| self.cov_factor[(edit_indices[j], r)]);
        let mut sigma_22 = &edited_factor * edited_factor.transpose();
        for (j, &i) in edit_indices.iter().enumerate() {
            sigma_22[(j, j)] += self.cov_diag[i];
        }
        let innovation = DVector::from_fn(k, |j, _| edit_values[j] - self.mu[edit_indices[j]]);
        let chol = Cholesky::new(sigma_22).ok_or(Error::NotPositiveDefinite("edited covariance block"))?;
        let weights = chol.solve(&innovation);
        // Σ₁₂ = P₁ P₂ᵀ because D is diagonal.
        let latent = edited_factor.tr_mul(&weights);
        if rank == 0 {
            return Ok(DVector::zeros(self.dim()));
        }
        Ok(&self.cov_factor * latent)
    }

    /// Little-endian: `S` and `R` as u64, then `μ`, `P` row-major, `d`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for v in self.mu.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.dim() {
            for r in 0..self.rank() {
                w.write_all(&self.cov_factor[(i, r)].to_le_bytes())?;
            }
        }
        for v in self.cov_diag.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let dim = read_u64(&mut r)? as usize;
        let rank = read_u64(&mut r)? as usize;
        if rank > dim {
            return Err(Error::Format(format!("rank {rank} exceeds dimension {dim}")));
        }
        let mu = DVector::from_vec(read_f64s(&mut r, dim)?);
        let factor = DMatrix::from_row_slice(dim, rank, &read_f64s(&mut r, dim * rank)?);
        let diag = DVector::from_vec(read_f64s(&mut r, dim)?);
        Self::new(mu, factor, diag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.dim() * (self.rank() + 2));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

/// Spherical interpolation with `ω = arccos(⟨a, b⟩ / (‖a‖‖b‖))`.
pub fn slerp(a: &DVector<f64>, b: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("slerp endpoint", a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation factor {t} outside [0, 1]")));
    }
    let norms = a.norm() * b.norm();
    if !(norms > 0.0) || !norms.is_finite() {
        return Err(Error::DegenerateSlerp);
    }
    let cos = (a.dot(b) / norms).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin = omega.sin();
    if sin.abs() < 1e-10 {
        return Err(Error::DegenerateSlerp);
    }
    let wa = ((1.0 - t) * omega).sin() / sin;
    let wb = (t * omega).sin() / sin;
    Ok(a * wa + b * wb)
}

pub(crate) fn factor_svd(factor: &DMatrix<f64>) -> Result<FactorSvd> {
    let (dim, rank) = factor.shape();
    if rank == 0 {
        return Ok(FactorSvd {
            u: DMatrix::zeros(dim, 0),
            singular_values: DVector::zeros(0),
            v_t: DMatrix::zeros(0, 0),
        });
    }
    let svd = factor.clone().try_svd(true, true, f64::EPSILON, 0).ok_or(Error::Svd)?;
    let u = svd.u.ok_or(Error::Svd)?;
    let v_t = svd.v_t.ok_or(Error::Svd)?;
    let values = svd.singular_values;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let k = order.len();
    let mut u_sorted = DMatrix::zeros(dim, k);
    let mut v_sorted = DMatrix::zeros(k, rank);
    let mut s_sorted = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let pivot = col.iter().copied().fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        u_sorted.set_column(dst, &(col * sign));
        v_sorted.set_row(dst, &(v_t.row(src) * sign));
        s_sorted[dst] = values[src];
    }
    Ok(FactorSvd {
        u: u_sorted,
        singular_values: s_sorted,
        v_t: v_sorted,
    })
}

fn edit_mask(dim: usize, indices: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; dim];
    for &i in indices {
        mask[i] = true;
    }
    mask
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
