//! Dense reference implementations. Everything here builds the full `S × S`
//! covariance and uses textbook factorizations, so it shares no code path with
//! the Woodbury implementation under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use sosvae::LowRankGaussian;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random well-conditioned instance: `d` in `[0.1, 1]`, factor entries of
/// order one half.
pub fn random_gaussian<R: Rng>(rng: &mut R, s: usize, r: usize) -> LowRankGaussian {
    let mu = normal_vec(rng, s);
    let p = normal_mat(rng, s, r) * 0.5;
    let d = DVector::from_fn(s, |_, _| rng.random_range(0.1..1.0));
    LowRankGaussian::new(mu, p, d).unwrap()
}

pub fn dense_sigma(mu_len: usize, p: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut sigma = p * p.transpose();
    for i in 0..mu_len {
        sigma[(i, i)] += d[i];
    }
    sigma
}

pub fn sigma_of(dist: &LowRankGaussian) -> DMatrix<f64> {
    dense_sigma(dist.dim(), dist.cov_factor(), dist.cov_diag())
}

/// Log determinant from the eigenvalues of the dense covariance.
pub fn dense_logdet(dist: &LowRankGaussian) -> f64 {
    sigma_of(dist).symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum()
}

/// Multivariate normal log density through a dense Cholesky factor.
pub fn dense_log_prob(dist: &LowRankGaussian, x: &DVector<f64>) -> f64 {
    let chol = sigma_of(dist).cholesky().expect("dense covariance is SPD");
    let l = chol.l();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let z = l.solve_lower_triangular(&(x - dist.mu())).unwrap();
    -0.5 * (dist.dim() as f64 * LN_2PI + logdet + z.norm_squared())
}

pub fn dense_entropy(dist: &LowRankGaussian) -> f64 {
    0.5 * dist.dim() as f64 * (1.0 + LN_2PI) + 0.5 * dense_logdet(dist)
}

/// Full image after conditioning: edited pixels hold `values`, the rest the
/// partitioned-Gaussian conditional mean.
pub fn dense_condition(dist: &LowRankGaussian, indices: &[usize], values: &[f64]) -> DVector<f64> {
    let sigma = sigma_of(dist);
    let s = dist.dim();
    let rest: Vec<usize> = (0..s).filter(|i| !indices.contains(i)).collect();
    let k = indices.len();
    let s22 = DMatrix::from_fn(k, k, |a, b| sigma[(indices[a], indices[b])]);
    let s12 = DMatrix::from_fn(rest.len(), k, |a, b| sigma[(rest[a], indices[b])]);
    let innovation = DVector::from_fn(k, |a, _| values[a] - dist.mu()[indices[a]]);
    let shift = s12 * s22.lu().solve(&innovation).expect("Σ₂₂ invertible");
    let mut out = dist.mu().clone();
    for (a, &i) in rest.iter().enumerate() {
        out[i] += shift[a];
    }
    for (a, &i) in indices.iter().enumerate() {
        out[i] = values[a];
    }
    out
}

/// Relative error with the denominator floored at one, so values near zero
/// are compared absolutely.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Norm-wise relative error `‖got − want‖ / max(‖want‖, floor)`.
pub fn rel_err_slice(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Flatten `(μ, P, d)` into one vector, `P` column-major.
pub fn pack(dist: &LowRankGaussian) -> Vec<f64> {
    let mut v = dist.mu().as_slice().to_vec();
    v.extend_from_slice(dist.cov_factor().as_slice());
    v.extend_from_slice(dist.cov_diag().as_slice());
    v
}

pub fn unpack(v: &[f64], s: usize, r: usize) -> LowRankGaussian {
    let mu = DVector::from_column_slice(&v[..s]);
    let p = DMatrix::from_column_slice(s, r, &v[s..s + s * r]);
    let d = DVector::from_column_slice(&v[s + s * r..]);
    LowRankGaussian::new(mu, p, d).unwrap()
}
