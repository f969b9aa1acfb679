//! Ready-made targets used by the experiments and tests.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::FactoredTarget;
use crate::rng::Streams;
use crate::special::{ln_sigmoid, sigmoid};
use crate::{arg, linalg, Result};

/// `θ ~ N(0, prior_var I)`, `x_n | θ ~ N(θ, noise_var I)` in `d` dimensions.
#[derive(Clone, Debug)]
pub struct GaussianMeanModel {
    dim: usize,
    prior_var: f64,
    noise_var: f64,
    data: Vec<f64>,
}

impl GaussianMeanModel {
    /// `data` is row-major, `N × dim`.
    pub fn new(dim: usize, prior_var: f64, noise_var: f64, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(arg("data is not a whole number of rows"));
        }
        if !(prior_var > 0.0 && noise_var > 0.0) {
            return Err(arg("variances must be positive"));
        }
        Ok(Self { dim, prior_var, noise_var, data })
    }

    /// Draw `n` observations around `truth`.
    pub fn generate(truth: &[f64], prior_var: f64, noise_var: f64, n: usize, streams: &Streams) -> Self {
        let mut rng = streams.stream(&[crate::rng::tag::DATA]);
        let sd = libm::sqrt(noise_var);
        let mut data = Vec::with_capacity(n * truth.len());
        for _ in 0..n {
            for t in truth {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(t + sd * z);
            }
        }
        Self { dim: truth.len(), prior_var, noise_var, data }
    }

    pub fn datum(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Posterior mean and (isotropic) variance.
    pub fn posterior(&self) -> (Vec<f64>, f64) {
        let n = self.n_data() as f64;
        let prec = 1.0 / self.prior_var + n / self.noise_var;
        let mut mean = vec![0.0; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.noise_var * prec);
        (mean, 1.0 / prec)
    }

    /// Per-datum statistics `(1, x, |x|²)`; the log-likelihood of any set of
    /// data is a function of their sum (see [`Self::log_lik_from_stats`]).
    pub fn datum_stats(&self, n: usize) -> Vec<f64> {
        let x = self.datum(n);
        let mut s = Vec::with_capacity(self.dim + 2);
        s.push(1.0);
        s.extend_from_slice(x);
        s.push(x.iter().map(|v| v * v).sum());
        s
    }

    /// `Σ_{n∈S} log π(x_n | θ)` from the summed statistics of `S`.
    pub fn log_lik_from_stats(&self, theta: &[f64], stats: &[f64]) -> f64 {
        let d = self.dim;
        let count = stats[0];
        let cross: f64 = theta.iter().zip(&stats[1..=d]).map(|(t, s)| t * s).sum();
        let tt: f64 = theta.iter().map(|t| t * t).sum();
        let quad = stats[d + 1] - 2.0 * cross + count * tt;
        -0.5 * quad / self.noise_var - 0.5 * count * d as f64 * libm::log(2.0 * PI * self.noise_var)
    }
}

impl FactoredTarget for GaussianMeanModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_data(&self) -> usize {
        self.data.len() / self.dim
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        let ss: f64 = theta.iter().map(|t| t * t).sum();
        -0.5 * ss / self.prior_var - 0.5 * self.dim as f64 * libm::log(2.0 * PI * self.prior_var)
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        let ss: f64 = self.datum(n).iter().zip(theta).map(|(x, t)| (x - t) * (x - t)).sum();
        -0.5 * ss / self.noise_var - 0.5 * self.dim as f64 * libm::log(2.0 * PI * self.noise_var)
    }
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(theta) {
            *o = -t / self.prior_var;
        }
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        for ((o, x), t) in out.iter_mut().zip(self.datum(n)).zip(theta) {
            *o = (x - t) / self.noise_var;
        }
    }
}

/// Bayesian logistic regression with labels `y ∈ {-1, +1}` and a
/// `N(0, prior_var I)` prior.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    prior_var: f64,
}

impl LogisticRegression {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>, prior_var: f64) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(arg("feature array does not match the labels"));
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(arg("labels must be -1 or +1"));
        }
        Ok(Self { dim, features, labels, prior_var })
    }

    /// Standard-normal features scaled by `feature_scale`, labels drawn from
    /// the model at `truth`.
    pub fn generate(truth: &[f64], n: usize, feature_scale: f64, prior_var: f64, streams: &Streams) -> Self {
        let d = truth.len();
        let mut rng = streams.stream(&[crate::rng::tag::DATA]);
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut z = 0.0;
            for t in truth {
                let x: f64 = StandardNormal.sample(&mut rng);
                let x = x * feature_scale;
                z += x * t;
                features.push(x);
            }
            labels.push(if rng.random::<f64>() < sigmoid(z) { 1.0 } else { -1.0 });
        }
        Self { dim: d, features, labels, prior_var }
    }

    pub fn feature(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    pub fn label(&self, n: usize) -> f64 {
        self.labels[n]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    /// Signed margin `y_n x_nᵀθ`.
    pub fn margin(&self, n: usize, theta: &[f64]) -> f64 {
        self.labels[n] * self.feature(n).iter().zip(theta).map(|(x, t)| x * t).sum::<f64>()
    }

    /// `max_n |x_n|`, the Lipschitz constant of every log-likelihood term.
    pub fn max_feature_norm(&self) -> f64 {
        self.features
            .chunks_exact(self.dim)
            .map(|x| libm::sqrt(x.iter().map(|v| v * v).sum::<f64>()))
            .fold(0.0, f64::max)
    }

    /// Posterior mode by Newton's method.
    pub fn map_estimate(&self) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut theta = DVector::zeros(d);
        for _ in 0..100 {
            let mut grad = -&theta / self.prior_var;
            let mut hess = DMatrix::identity(d, d) / self.prior_var;
            for n in 0..self.labels.len() {
                let x = DVector::from_column_slice(self.feature(n));
                let z = self.labels[n] * x.dot(&theta);
                let s = sigmoid(-z);
                grad += &x * (self.labels[n] * s);
                hess += &x * x.transpose() * (s * (1.0 - s));
            }
            let step = linalg::cholesky(&hess, 0)?.solve(&grad);
            theta += &step;
            if step.amax() < 1e-12 {
                break;
            }
        }
        Ok(theta.iter().copied().collect())
    }
}

impl FactoredTarget for LogisticRegression {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_data(&self) -> usize {
        self.labels.len()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        let ss: f64 = theta.iter().map(|t| t * t).sum();
        -0.5 * ss / self.prior_var - 0.5 * self.dim as f64 * libm::log(2.0 * PI * self.prior_var)
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        ln_sigmoid(self.margin(n, theta))
    }
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(theta) {
            *o = -t / self.prior_var;
        }
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        let w = self.labels[n] * sigmoid(-self.margin(n, theta));
        for (o, x) in out.iter_mut().zip(self.feature(n)) {
            *o = w * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grad_log_joint, log_joint, max_gradient_error, GaussianModelSpec};

    #[test]
    fn gaussian_mean_matches_spec_oracle() {
        let m = GaussianMeanModel::generate(&[1.0], 2.0, 0.5, 40, &Streams::new(3));
        let data: Vec<f64> = m.data().to_vec();
        let spec = GaussianModelSpec::scalar(2.0, 0.5, &data).unwrap();
        let (mu, cov) = spec.posterior().unwrap();
        let (mean, var) = m.posterior();
        assert!((mu[0] - mean[0]).abs() < 1e-12 && (cov[(0, 0)] - var).abs() < 1e-14);
        let a = [0.2];
        let b = [1.7];
        let lhs = log_joint(&m, &a).unwrap() - log_joint(&m, &b).unwrap();
        let rhs = spec.log_posterior_density(&a).unwrap() - spec.log_posterior_density(&b).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!(max_gradient_error(&m, &a) < 1e-5);
    }

    #[test]
    fn gaussian_collapsed_stats() {
        let m = GaussianMeanModel::generate(&[1.0, -2.0], 1.0, 0.3, 25, &Streams::new(4));
        let theta = [0.3, -1.1];
        let mut stats = vec![0.0; 4];
        let mut direct = 0.0;
        for n in (0..25).step_by(3) {
            for (s, v) in stats.iter_mut().zip(m.datum_stats(n)) {
                *s += v;
            }
            direct += m.log_lik_term(n, &theta);
        }
        assert!((m.log_lik_from_stats(&theta, &stats) - direct).abs() < 1e-10);
    }

    #[test]
    fn logistic_gradients_and_mode() {
        let m = LogisticRegression::generate(&[1.0, -0.5, 0.25], 500, 1.0, 10.0, &Streams::new(9));
        assert!(max_gradient_error(&m, &[0.3, 0.1, -0.2]) < 1e-5);
        let mode = m.map_estimate().unwrap();
        let g = grad_log_joint(&m, &mode).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
        assert!((mode[0] - 1.0).abs() < 0.4);
        assert!(LogisticRegression::new(1, vec![1.0], vec![0.0], 1.0).is_err());
    }
}
