use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A posterior given as a prior times `N` per-datum likelihood terms.
///
/// Implementations must be reentrant: the parallel algorithms evaluate the
/// same target from several workers.
pub trait FactoredTarget {
    fn dim(&self) -> usize;
    fn n_data(&self) -> usize;
    fn log_prior(&self, theta: &[f64]) -> f64;
    /// `log π(x_n | θ)`.
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64;

    /// Gradient of the log-prior, written into `out`. Defaults to central
    /// differences.
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        central_difference(&|t: &[f64]| self.log_prior(t), theta, out);
    }

    /// Gradient of the `n`-th log-likelihood term. Defaults to central
    /// differences.
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        central_difference(&|t: &[f64]| self.log_lik_term(n, t), theta, out);
    }
}

impl<T: FactoredTarget + ?Sized> FactoredTarget for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_data(&self) -> usize {
        (**self).n_data()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        (**self).log_prior(theta)
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        (**self).log_lik_term(n, theta)
    }
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        (**self).grad_log_prior(theta, out)
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        (**self).grad_log_lik_term(n, theta, out)
    }
}

/// Central finite differences with step `1e-6 (1 + |θ_i|)`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], out: &mut [f64]) {
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[i].abs());
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        out[i] = (up - down) / (2.0 * h);
    }
}

/// Sum of all likelihood terms, accumulated in index order.
pub fn log_likelihood<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for n in 0..target.n_data() {
        acc += target.log_lik_term(n, theta);
    }
    acc
}

/// `log π0(θ) + Σ_n log π(x_n | θ)`; non-finite values are an error.
pub fn log_joint<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64]) -> Result<f64> {
    let v = target.log_prior(theta) + log_likelihood(target, theta);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("log joint is {v}")))
    }
}

/// Gradient of the log joint.
pub fn grad_log_joint<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64]) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut total = vec![0.0; d];
    target.grad_log_prior(theta, &mut total);
    let mut term = vec![0.0; d];
    for n in 0..target.n_data() {
        target.grad_log_lik_term(n, theta, &mut term);
        for (t, g) in total.iter_mut().zip(&term) {
            *t += g;
        }
    }
    if total.iter().all(|g| g.is_finite()) {
        Ok(total)
    } else {
        Err(Error::Evaluation("non-finite gradient".into()))
    }
}

/// Largest relative disagreement between the supplied gradients (prior and
/// every likelihood term) and central differences at `theta`.
pub fn max_gradient_error<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64]) -> f64 {
    let d = target.dim();
    let mut analytic = vec![0.0; d];
    let mut numeric = vec![0.0; d];
    let rel = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f64::max)
    };
    target.grad_log_prior(theta, &mut analytic);
    central_difference(&|t: &[f64]| target.log_prior(t), theta, &mut numeric);
    let mut worst = rel(&analytic, &numeric);
    for n in 0..target.n_data() {
        target.grad_log_lik_term(n, theta, &mut analytic);
        central_difference(&|t: &[f64]| target.log_lik_term(n, t), theta, &mut numeric);
        worst = worst.max(rel(&analytic, &numeric));
    }
    worst
}

/// A target assembled from closures.
pub struct FnTarget<P, L> {
    dim: usize,
    n_data: usize,
    prior: P,
    lik: L,
}

impl<P, L> FnTarget<P, L>
where
    P: Fn(&[f64]) -> f64,
    L: Fn(usize, &[f64]) -> f64,
{
    pub fn new(dim: usize, n_data: usize, prior: P, lik: L) -> Self {
        Self { dim, n_data, prior, lik }
    }
}

impl<P, L> FactoredTarget for FnTarget<P, L>
where
    P: Fn(&[f64]) -> f64,
    L: Fn(usize, &[f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_data(&self) -> usize {
        self.n_data
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        (self.prior)(theta)
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        (self.lik)(n, theta)
    }
}
