use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, Normal, Poisson as PoissonDist};

use crate::linalg;
use crate::special::{digamma, ln_beta, ln_gamma, sigmoid, trigamma};
use crate::{Error, Result};

/// An exponential family `h(x) exp{<η, t(x)> - log Z(η)}` in natural form.
pub trait ExpFamily {
    /// Dimension of the sufficient statistic (and natural parameter).
    fn stat_dim(&self) -> usize;
    /// Dimension of one observation `x`.
    fn sample_dim(&self) -> usize;
    fn statistic(&self, x: &[f64]) -> Vec<f64>;
    fn log_partition(&self, eta: &[f64]) -> f64;
    fn in_domain(&self, eta: &[f64]) -> bool;
    /// Human-readable description of the base measure `h(x) ν(dx)`.
    fn base_measure_desc(&self) -> &'static str;
    /// `log h(x)` with respect to the base measure in the description.
    fn log_base_measure(&self, x: &[f64]) -> f64;
    /// `log h` when it does not depend on `x` (needed for entropies).
    fn constant_log_base_measure(&self) -> Option<f64> {
        None
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// `∇ log Z(η)` in closed form, if the family has one.
    fn closed_form_mean(&self, _eta: &[f64]) -> Option<Vec<f64>> {
        None
    }
    /// `∇² log Z(η)` in closed form, if the family has one.
    fn closed_form_fisher(&self, _eta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

fn check(spec: &dyn ExpFamily, eta: &[f64], name: &'static str) -> Result<()> {
    if eta.len() != spec.stat_dim() || !spec.in_domain(eta) {
        return Err(Error::Domain(name));
    }
    Ok(())
}

fn fd_step(v: f64) -> f64 {
    1e-5 * (1.0 + v.abs())
}

/// Mean parameter `E[t(X)] = ∇ log Z(η)`.
pub fn expfam_mean(spec: &dyn ExpFamily, eta: &[f64]) -> Result<Vec<f64>> {
    check(spec, eta, "expfam_mean")?;
    if let Some(m) = spec.closed_form_mean(eta) {
        return Ok(m);
    }
    let mut probe = eta.to_vec();
    let mut mean = vec![0.0; eta.len()];
    for i in 0..eta.len() {
        let h = fd_step(eta[i]);
        probe[i] = eta[i] + h;
        let up = spec.log_partition(&probe);
        probe[i] = eta[i] - h;
        let down = spec.log_partition(&probe);
        probe[i] = eta[i];
        mean[i] = (up - down) / (2.0 * h);
    }
    Ok(mean)
}

fn fd_fisher(spec: &dyn ExpFamily, eta: &[f64]) -> DMatrix<f64> {
    let k = eta.len();
    let mut fisher = DMatrix::zeros(k, k);
    let mut probe = eta.to_vec();
    let f = |p: &[f64]| spec.log_partition(p);
    let f0 = f(eta);
    for i in 0..k {
        let hi = fd_step(eta[i]) * 10.0;
        probe[i] = eta[i] + hi;
        let up = f(&probe);
        probe[i] = eta[i] - hi;
        let down = f(&probe);
        probe[i] = eta[i];
        fisher[(i, i)] = (up - 2.0 * f0 + down) / (hi * hi);
        for j in 0..i {
            let hj = fd_step(eta[j]) * 10.0;
            let mut corner = |si: f64, sj: f64| {
                probe[i] = eta[i] + si * hi;
                probe[j] = eta[j] + sj * hj;
                let v = f(&probe);
                probe[i] = eta[i];
                probe[j] = eta[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * hi * hj);
            fisher[(i, j)] = v;
            fisher[(j, i)] = v;
        }
    }
    fisher
}

/// Score `t(x) - E[t(X)]` and Fisher information `∇² log Z(η)`.
pub fn expfam_score_fisher(
    spec: &dyn ExpFamily,
    eta: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mean = expfam_mean(spec, eta)?;
    let t = spec.statistic(x);
    let score = t.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let fisher = match spec.closed_form_fisher(eta) {
        Some(f) => f,
        None => linalg::symmetrize(fd_fisher(spec, eta)),
    };
    Ok((score, fisher))
}

/// `log h(x) + <η, t(x)> - log Z(η)`.
pub fn log_density(spec: &dyn ExpFamily, eta: &[f64], x: &[f64]) -> Result<f64> {
    check(spec, eta, "log_density")?;
    let t = spec.statistic(x);
    let inner: f64 = eta.iter().zip(&t).map(|(a, b)| a * b).sum();
    Ok(spec.log_base_measure(x) + inner - spec.log_partition(eta))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Bernoulli with `t(x) = x`, `η = logit p`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bernoulli;

impl ExpFamily for Bernoulli {
    fn stat_dim(&self) -> usize {
        1
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        softplus(eta[0])
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta[0].is_finite()
    }
    fn base_measure_desc(&self) -> &'static str {
        "counting measure on {0, 1}, h(x) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        vec![if rng.random::<f64>() < sigmoid(eta[0]) { 1.0 } else { 0.0 }]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![sigmoid(eta[0])])
    }
    fn closed_form_fisher(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        let p = sigmoid(eta[0]);
        Some(DMatrix::from_element(1, 1, p * (1.0 - p)))
    }
}

/// Poisson with `t(x) = x`, `η = log λ`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Poisson;

impl ExpFamily for Poisson {
    fn stat_dim(&self) -> usize {
        1
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        libm::exp(eta[0])
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta[0].is_finite() && eta[0] < 700.0
    }
    fn base_measure_desc(&self) -> &'static str {
        "counting measure on the naturals, h(x) = 1/x!"
    }
    fn log_base_measure(&self, x: &[f64]) -> f64 {
        -ln_gamma(x[0] + 1.0)
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let lambda = libm::exp(eta[0]);
        let x: f64 = PoissonDist::new(lambda).map(|d| d.sample(rng)).unwrap_or(0.0);
        vec![x]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![libm::exp(eta[0])])
    }
    fn closed_form_fisher(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, libm::exp(eta[0])))
    }
}

/// Univariate Gaussian with `t(x) = (x, x²)`, `η = (μ/σ², -1/(2σ²))`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gaussian;

impl Gaussian {
    /// Natural parameter of `N(mean, var)`.
    pub fn natural(mean: f64, var: f64) -> [f64; 2] {
        [mean / var, -0.5 / var]
    }
}

impl ExpFamily for Gaussian {
    fn stat_dim(&self) -> usize {
        2
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0], x[0] * x[0]]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        -eta[0] * eta[0] / (4.0 * eta[1]) - 0.5 * libm::log(-2.0 * eta[1])
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta[0].is_finite() && eta[1] < 0.0
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on R, h(x) = (2π)^(-1/2)"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        -0.5 * libm::log(2.0 * PI)
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let var = -0.5 / eta[1];
        let mean = eta[0] * var;
        vec![Normal::new(mean, libm::sqrt(var)).unwrap().sample(rng)]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let var = -0.5 / eta[1];
        let mean = eta[0] * var;
        Some(vec![mean, mean * mean + var])
    }
}

/// Conjugate prior of the Bernoulli likelihood in `(Σx, n)` form.
///
/// `t(θ) = (logit θ, log(1 - θ))` and `η = (a, n)`; the density is
/// `Beta(a + 1, n - a + 1)`, so `η = 0` is the uniform prior and one
/// observation `x` adds `(x, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct BernoulliConjugatePrior;

impl BernoulliConjugatePrior {
    /// The `Beta(α, β)` shape parameters of `η`.
    pub fn beta_shapes(eta: &[f64]) -> (f64, f64) {
        (eta[0] + 1.0, eta[1] - eta[0] + 1.0)
    }
}

impl ExpFamily for BernoulliConjugatePrior {
    fn stat_dim(&self) -> usize {
        2
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        let t = x[0];
        vec![libm::log(t) - libm::log1p(-t), libm::log1p(-t)]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        let (a, b) = Self::beta_shapes(eta);
        ln_beta(a, b)
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        let (a, b) = Self::beta_shapes(eta);
        a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on (0, 1), h(θ) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (a, b) = Self::beta_shapes(eta);
        vec![BetaDist::new(a, b).unwrap().sample(rng)]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let (a, b) = Self::beta_shapes(eta);
        Some(vec![digamma(a) - digamma(b), digamma(b) - digamma(a + b)])
    }
    fn closed_form_fisher(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        // d/da and d/dn of the mean map, with α = a + 1, β = n - a + 1.
        let (a, b) = Self::beta_shapes(eta);
        let (ta, tb, tab) = (trigamma(a), trigamma(b), trigamma(a + b));
        Some(DMatrix::from_row_slice(2, 2, &[ta + tb, -tb, -tb, tb - tab]))
    }
}

/// Conjugate prior of the Poisson likelihood in `(Σx, n)` form.
///
/// `t(λ) = (log λ, -λ)` and `η = (a, n)`; the density is
/// `Gamma(shape a + 1, rate n)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PoissonConjugatePrior;

impl ExpFamily for PoissonConjugatePrior {
    fn stat_dim(&self) -> usize {
        2
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        vec![libm::log(x[0]), -x[0]]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        ln_gamma(eta[0] + 1.0) - (eta[0] + 1.0) * libm::log(eta[1])
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta[0] > -1.0 && eta[1] > 0.0 && eta[0].is_finite() && eta[1].is_finite()
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on (0, ∞), h(λ) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        vec![GammaDist::new(eta[0] + 1.0, 1.0 / eta[1]).unwrap().sample(rng)]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let shape = eta[0] + 1.0;
        Some(vec![digamma(shape) - libm::log(eta[1]), -shape / eta[1]])
    }
    fn closed_form_fisher(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        let shape = eta[0] + 1.0;
        let n = eta[1];
        Some(DMatrix::from_row_slice(2, 2, &[trigamma(shape), -1.0 / n, -1.0 / n, shape / (n * n)]))
    }
}

/// Conjugate prior of a Gaussian mean: `t(θ) = (θ, -θ²/2)`, `η = (τ, λ)`,
/// i.e. `N(τ/λ, 1/λ)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NormalMeanPrior;

impl NormalMeanPrior {
    pub fn natural(mean: f64, var: f64) -> [f64; 2] {
        [mean / var, 1.0 / var]
    }

    /// `(mean, variance)` of `η`.
    pub fn moments(eta: &[f64]) -> (f64, f64) {
        (eta[0] / eta[1], 1.0 / eta[1])
    }
}

impl ExpFamily for NormalMeanPrior {
    fn stat_dim(&self) -> usize {
        2
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0], -0.5 * x[0] * x[0]]
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        eta[0] * eta[0] / (2.0 * eta[1]) + 0.5 * libm::log(2.0 * PI / eta[1])
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta[0].is_finite() && eta[1] > 0.0 && eta[1].is_finite()
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on R, h(θ) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (m, v) = Self::moments(eta);
        vec![Normal::new(m, libm::sqrt(v)).unwrap().sample(rng)]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let (m, v) = Self::moments(eta);
        Some(vec![m, -0.5 * (m * m + v)])
    }
}

/// Dirichlet on the `k`-simplex: `t(x) = log x`, `η = α - 1`.
#[derive(Clone, Copy, Debug)]
pub struct Dirichlet {
    pub k: usize,
}

impl ExpFamily for Dirichlet {
    fn stat_dim(&self) -> usize {
        self.k
    }
    fn sample_dim(&self) -> usize {
        self.k
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| libm::log(*v)).collect()
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut acc = 0.0;
        for e in eta {
            let a = e + 1.0;
            total += a;
            acc += ln_gamma(a);
        }
        acc - ln_gamma(total)
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        eta.iter().all(|e| *e > -1.0 && e.is_finite())
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on the open simplex, h(x) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut g: Vec<f64> = eta
            .iter()
            .map(|e| GammaDist::new(e + 1.0, 1.0).unwrap().sample(rng))
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let total: f64 = eta.iter().map(|e| e + 1.0).sum();
        let dt = digamma(total);
        Some(eta.iter().map(|e| digamma(e + 1.0) - dt).collect())
    }
}

/// Multivariate Gaussian in information form: `t(θ) = (θ, -vec(θθᵀ)/2)`,
/// `η = (h, vec P)` with precision `P` (row-major), i.e. `N(P⁻¹h, P⁻¹)`.
#[derive(Clone, Copy, Debug)]
pub struct MvNormalInfo {
    pub d: usize,
}

impl MvNormalInfo {
    /// Split `η` into the potential vector and precision matrix.
    pub fn split(&self, eta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.d;
        (
            DVector::from_column_slice(&eta[..d]),
            DMatrix::from_row_slice(d, d, &eta[d..d + d * d]),
        )
    }

    pub fn join(h: &DVector<f64>, p: &DMatrix<f64>) -> Vec<f64> {
        let d = h.len();
        let mut eta = Vec::with_capacity(d + d * d);
        eta.extend(h.iter());
        for i in 0..d {
            for j in 0..d {
                eta.push(p[(i, j)]);
            }
        }
        eta
    }

    /// `(mean, covariance)` of `η`.
    pub fn moments(&self, eta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (h, p) = self.split(eta);
        let cov = linalg::spd_inverse(&p, 0)?;
        Ok((&cov * h, cov))
    }
}

impl ExpFamily for MvNormalInfo {
    fn stat_dim(&self) -> usize {
        self.d + self.d * self.d
    }
    fn sample_dim(&self) -> usize {
        self.d
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        let mut t = x.to_vec();
        for i in 0..self.d {
            for j in 0..self.d {
                t.push(-0.5 * x[i] * x[j]);
            }
        }
        t
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        // General LU so that finite differences may step off the symmetric
        // subspace.
        let (h, p) = self.split(eta);
        let lu = p.clone().lu();
        let det = lu.determinant();
        match lu.solve(&h) {
            Some(x) if det > 0.0 => {
                0.5 * h.dot(&x) - 0.5 * libm::log(det) + 0.5 * self.d as f64 * libm::log(2.0 * PI)
            }
            _ => f64::INFINITY,
        }
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        let (h, p) = self.split(eta);
        h.iter().all(|v| v.is_finite()) && linalg::cholesky(&p, 0).is_ok()
    }
    fn base_measure_desc(&self) -> &'static str {
        "Lebesgue measure on R^d, h(θ) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(self.log_base_measure(&[]))
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (mean, cov) = self.moments(eta).expect("in-domain parameter");
        let l = linalg::cholesky(&cov, 0).expect("covariance is SPD").l();
        linalg::to_vec(&linalg::mvn_sample(&mean, &l, rng))
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let (mean, cov) = self.moments(eta).ok()?;
        let second = &cov + &mean * mean.transpose();
        Some(Self::join(&mean, &(second * -0.5)))
    }
}

/// Categorical over `0..k` with one-hot `t(x)` and unconstrained `η`
/// (identified up to an additive constant), `log Z = log Σ exp η`.
#[derive(Clone, Copy, Debug)]
pub struct Categorical {
    pub k: usize,
}

impl ExpFamily for Categorical {
    fn stat_dim(&self) -> usize {
        self.k
    }
    fn sample_dim(&self) -> usize {
        1
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.k];
        let c = x[0] as usize;
        if c < self.k {
            t[c] = 1.0;
        }
        t
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        crate::special::log_sum_exp(eta)
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        self.k > 0 && eta.iter().all(|e| e.is_finite())
    }
    fn base_measure_desc(&self) -> &'static str {
        "counting measure on {0, ..., k-1}, h(x) = 1"
    }
    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        Some(0.0)
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let p = self.closed_form_mean(eta).unwrap_or_default();
        let mut u: f64 = rng.random();
        for (c, pc) in p.iter().enumerate() {
            u -= pc;
            if u < 0.0 {
                return vec![c as f64];
            }
        }
        vec![(self.k - 1) as f64]
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        let z = crate::special::log_sum_exp(eta);
        Some(eta.iter().map(|e| libm::exp(e - z)).collect())
    }
}
