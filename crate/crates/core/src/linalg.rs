//! Dense linear-algebra helpers on top of `nalgebra`.

use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Cholesky factorization that fails hard on non-SPD input.
///
/// `index` identifies the matrix in the error.
pub fn cholesky(m: &DMatrix<f64>, index: usize) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() || !is_symmetric(m) {
        return Err(Error::NotPositiveDefinite { index });
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { index })
}

/// Symmetric to within a tight relative tolerance.
pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
    let inv = cholesky(m, index)?.inverse();
    Ok(symmetrize(inv))
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    let t = a.transpose();
    (a + t) * 0.5
}

/// Log-determinant of an SPD matrix.
pub fn spd_log_det(m: &DMatrix<f64>, index: usize) -> Result<f64> {
    let l = cholesky(m, index)?;
    Ok(2.0 * l.l().diagonal().iter().map(|x| libm::log(*x)).sum::<f64>())
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| nalgebra::ComplexField::modulus(*c))
        .fold(0.0, f64::max)
}

/// A vector of iid standard normal draws.
pub fn standard_normal_vec(d: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Draw from `N(mean, L L^T)` given the lower Cholesky factor `l`.
pub fn mvn_sample(mean: &DVector<f64>, l: &DMatrix<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
    mean + l * standard_normal_vec(mean.len(), rng)
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(cov, 0)?;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).ok_or_else(|| Error::Numeric("triangular solve".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
    let d = x.len() as f64;
    Ok(-0.5 * (z.norm_squared() + log_det + d * libm::log(2.0 * core::f64::consts::PI)))
}

/// Column means of a row-major `rows × dim` array.
pub fn sample_mean(data: &[f64], dim: usize) -> DVector<f64> {
    let rows = data.len().checked_div(dim).unwrap_or(0);
    let mut mean = DVector::zeros(dim);
    for r in 0..rows {
        for c in 0..dim {
            mean[c] += data[r * dim + c];
        }
    }
    if rows > 0 {
        mean /= rows as f64;
    }
    mean
}

/// Sample covariance (denominator `rows - 1`) of a row-major array.
pub fn sample_cov(data: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    let rows = data.len().checked_div(dim).unwrap_or(0);
    if rows < 2 {
        return Err(Error::Degenerate("covariance needs at least two rows".into()));
    }
    let mean = sample_mean(data, dim);
    let mut cov = DMatrix::zeros(dim, dim);
    let mut centered = alloc::vec![0.0; dim];
    for r in 0..rows {
        for c in 0..dim {
            centered[c] = data[r * dim + c] - mean[c];
        }
        for i in 0..dim {
            for j in 0..=i {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok(cov / (rows as f64 - 1.0))
}

/// Convert a slice to an `nalgebra` vector.
pub fn vector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Convert an `nalgebra` vector to a `Vec`.
pub fn to_vec(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// Relative Frobenius distance `|a - b|_F / |b|_F`.
pub fn frobenius_relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
