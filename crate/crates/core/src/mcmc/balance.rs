use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::{arg, Error, Result};

/// Largest state space the dense kernel utilities accept.
pub const MAX_STATES: usize = 10_000;

/// A transition kernel on `{0, .., n-1}` stored densely, row `i` holding
/// `T(i → ·)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteKernel {
    n: usize,
    p: Vec<f64>,
}

impl FiniteKernel {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if n > MAX_STATES {
            return Err(Error::Capacity { size: n, capacity: MAX_STATES });
        }
        let mut p = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                p.push(f(i, j));
            }
        }
        Ok(Self { n, p })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    /// Rows are nonnegative and sum to one within `tol`.
    pub fn is_stochastic(&self, tol: f64) -> bool {
        self.p.chunks_exact(self.n.max(1)).all(|row| {
            row.iter().all(|v| *v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// Apply `self` then `other`.
    pub fn compose(&self, other: &FiniteKernel) -> Result<Self> {
        if self.n != other.n {
            return Err(arg("kernel sizes differ"));
        }
        let n = self.n;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    p[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Ok(Self { n, p })
    }

    /// `self + w · other`.
    pub fn add_scaled(&self, other: &FiniteKernel, w: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(arg("kernel sizes differ"));
        }
        let p = self.p.iter().zip(&other.p).map(|(a, b)| a + w * b).collect();
        Ok(Self { n: self.n, p })
    }

    /// Distribution after one step from `dist`.
    pub fn step(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &w) in dist.iter().enumerate() {
            for j in 0..self.n {
                out[j] += w * self.get(i, j);
            }
        }
        out
    }

    /// The stationary distribution, by solving `πT = π`, `Σπ = 1`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let n = self.n;
        if n == 0 {
            return Err(arg("empty state space"));
        }
        let mut a = DMatrix::from_fn(n, n, |i, j| self.get(j, i) - if i == j { 1.0 } else { 0.0 });
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let pi = a.lu().solve(&b).ok_or_else(|| Error::Numeric("stationary system is singular".into()))?;
        Ok(pi.iter().copied().collect())
    }
}

/// `max_{x,x'} |T(x → x') π(x) - T(x' → x) π(x')|`.
pub fn detailed_balance_check(kernel: &FiniteKernel, pi: &[f64]) -> Result<f64> {
    let n = kernel.n();
    if n > MAX_STATES {
        return Err(Error::Capacity { size: n, capacity: MAX_STATES });
    }
    if pi.len() != n {
        return Err(arg("distribution and kernel sizes differ"));
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((kernel.get(i, j) * pi[i] - kernel.get(j, i) * pi[j]).abs());
        }
    }
    Ok(worst)
}

/// The Metropolis-Hastings kernel for target weights `pi` (unnormalized is
/// fine) and proposal kernel `q`, including the rejection mass.
pub fn mh_kernel(pi: &[f64], q: &FiniteKernel) -> Result<FiniteKernel> {
    let n = q.n();
    if pi.len() != n {
        return Err(arg("distribution and kernel sizes differ"));
    }
    let accept = |i: usize, j: usize| {
        let fwd = pi[i] * q.get(i, j);
        if fwd <= 0.0 {
            return 0.0;
        }
        (pi[j] * q.get(j, i) / fwd).min(1.0)
    };
    let mut k = FiniteKernel::from_fn(n, |i, j| if i == j { 0.0 } else { q.get(i, j) * accept(i, j) })?;
    for i in 0..n {
        let moved: f64 = (0..n).filter(|j| *j != i).map(|j| k.get(i, j)).sum();
        k.p[i * n + i] = 1.0 - moved;
    }
    Ok(k)
}

/// Total variation distance `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mh_kernel_on_three_states_is_reversible() {
        let pi = [0.2, 0.5, 0.3];
        let q = FiniteKernel::from_fn(3, |i, j| [[0.1, 0.6, 0.3], [0.5, 0.25, 0.25], [0.7, 0.2, 0.1]][i][j]).unwrap();
        let k = mh_kernel(&pi, &q).unwrap();
        assert!(k.is_stochastic(1e-14));
        assert!(detailed_balance_check(&k, &pi).unwrap() < 1e-12);
        let s = k.stationary().unwrap();
        assert!(total_variation(&s, &pi) < 1e-12);
        // Unnormalized weights give the same kernel.
        let k2 = mh_kernel(&[2.0, 5.0, 3.0], &q).unwrap();
        assert!(k.p.iter().zip(&k2.p).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn identity_and_cyclic_shift() {
        let id = FiniteKernel::identity(4).unwrap();
        assert_eq!(detailed_balance_check(&id, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.0);
        let shift = FiniteKernel::from_fn(3, |i, j| if j == (i + 1) % 3 { 1.0 } else { 0.0 }).unwrap();
        let v = detailed_balance_check(&shift, &[1.0 / 3.0; 3]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn capacity_is_enforced() {
        let err = FiniteKernel::from_fn(MAX_STATES + 1, |_, _| 0.0).unwrap_err();
        assert_eq!(err, Error::Capacity { size: MAX_STATES + 1, capacity: MAX_STATES });
    }
}
