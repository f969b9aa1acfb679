use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::target::FactoredTarget;
use crate::{arg, linalg, Result};

/// Gaussian prior `θ ~ N(0, Σ0)` with shard observations
/// `x_j | θ ~ N(θ, Σ_j)`; everything about it is available in closed form.
#[derive(Clone, Debug)]
pub struct GaussianModelSpec {
    prior_cov: DMatrix<f64>,
    shard_covs: Vec<DMatrix<f64>>,
    shard_obs: Vec<DVector<f64>>,
    prior_prec: DMatrix<f64>,
    shard_precs: Vec<DMatrix<f64>>,
    prior_log_det: f64,
    shard_log_dets: Vec<f64>,
}

fn ln_normal(x: &DVector<f64>, prec: &DMatrix<f64>, log_det_cov: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * ((prec * x).dot(x) + log_det_cov + d * libm::log(2.0 * PI))
}

impl GaussianModelSpec {
    /// Validates that every covariance is SPD; errors carry index 0 for the
    /// prior and `j + 1` for shard `j`.
    pub fn new(
        prior_cov: DMatrix<f64>,
        shard_covs: Vec<DMatrix<f64>>,
        shard_obs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let d = prior_cov.nrows();
        if d == 0 {
            return Err(arg("dimension must be positive"));
        }
        if shard_covs.len() != shard_obs.len() {
            return Err(arg("one covariance per shard observation is required"));
        }
        let prior_prec = linalg::spd_inverse(&prior_cov, 0)?;
        let prior_log_det = linalg::spd_log_det(&prior_cov, 0)?;
        let mut shard_precs = Vec::with_capacity(shard_covs.len());
        let mut shard_log_dets = Vec::with_capacity(shard_covs.len());
        for (j, (c, x)) in shard_covs.iter().zip(&shard_obs).enumerate() {
            if c.nrows() != d || x.len() != d {
                return Err(arg("shard dimension mismatch"));
            }
            shard_precs.push(linalg::spd_inverse(c, j + 1)?);
            shard_log_dets.push(linalg::spd_log_det(c, j + 1)?);
        }
        Ok(Self { prior_cov, shard_covs, shard_obs, prior_prec, shard_precs, prior_log_det, shard_log_dets })
    }

    /// Scalar observations `x_n ~ N(θ, noise_var)` under `θ ~ N(0, prior_var)`.
    pub fn scalar(prior_var: f64, noise_var: f64, data: &[f64]) -> Result<Self> {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(
            one(prior_var),
            data.iter().map(|_| one(noise_var)).collect(),
            data.iter().map(|x| DVector::from_element(1, *x)).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.prior_cov.nrows()
    }

    pub fn n_shards(&self) -> usize {
        self.shard_covs.len()
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn shard_cov(&self, j: usize) -> &DMatrix<f64> {
        &self.shard_covs[j]
    }

    pub fn shard_obs(&self, j: usize) -> &DVector<f64> {
        &self.shard_obs[j]
    }

    /// Posterior `(μ, Σ)` with `Σ = (Σ0⁻¹ + Σ_j Σ_j⁻¹)⁻¹`, `μ = Σ Σ_j Σ_j⁻¹ x_j`.
    pub fn posterior(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut prec = self.prior_prec.clone();
        let mut h = DVector::zeros(self.dim());
        for (p, x) in self.shard_precs.iter().zip(&self.shard_obs) {
            prec += p;
            h += p * x;
        }
        let cov = linalg::spd_inverse(&prec, 0)?;
        Ok((&cov * h, cov))
    }

    /// Subposterior of shard `j` (zero-based), whose prior is `Σ0 / J`-tempered:
    /// `Σ̃_j = (Σ0⁻¹/J + Σ_j⁻¹)⁻¹`, `μ̃_j = Σ̃_j Σ_j⁻¹ x_j`.
    pub fn subposterior(&self, j: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let big_j = self.n_shards();
        if j >= big_j {
            return Err(arg("shard index out of range"));
        }
        let prec = &self.prior_prec / big_j as f64 + &self.shard_precs[j];
        let cov = linalg::spd_inverse(&prec, j + 1)?;
        let mean = &cov * (&self.shard_precs[j] * &self.shard_obs[j]);
        Ok((mean, cov))
    }

    /// Normalized posterior log-density.
    pub fn log_posterior_density(&self, theta: &[f64]) -> Result<f64> {
        let (m, c) = self.posterior()?;
        linalg::mvn_ln_pdf(&DVector::from_column_slice(theta), &m, &c)
    }

    /// Normalized log-density of subposterior `j`.
    pub fn log_subposterior_density(&self, j: usize, theta: &[f64]) -> Result<f64> {
        let (m, c) = self.subposterior(j)?;
        linalg::mvn_ln_pdf(&DVector::from_column_slice(theta), &m, &c)
    }

    /// The model as a factored target with one likelihood term per shard.
    pub fn target(&self) -> GaussianShardTarget {
        GaussianShardTarget { spec: self.clone() }
    }
}

/// [`GaussianModelSpec`] viewed as a [`FactoredTarget`]; datum `n` is shard `n`.
#[derive(Clone, Debug)]
pub struct GaussianShardTarget {
    spec: GaussianModelSpec,
}

impl GaussianShardTarget {
    pub fn spec(&self) -> &GaussianModelSpec {
        &self.spec
    }
}

impl FactoredTarget for GaussianShardTarget {
    fn dim(&self) -> usize {
        self.spec.dim()
    }
    fn n_data(&self) -> usize {
        self.spec.n_shards()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        ln_normal(&DVector::from_column_slice(theta), &self.spec.prior_prec, self.spec.prior_log_det)
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        let diff = &self.spec.shard_obs[n] - DVector::from_column_slice(theta);
        ln_normal(&diff, &self.spec.shard_precs[n], self.spec.shard_log_dets[n])
    }
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        let g = -(&self.spec.prior_prec * DVector::from_column_slice(theta));
        out.copy_from_slice(g.as_slice());
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        let diff = &self.spec.shard_obs[n] - DVector::from_column_slice(theta);
        out.copy_from_slice((&self.spec.shard_precs[n] * diff).as_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use crate::model::conjugate::{conjugate_posterior_update, ConjugatePair, MvNormalMean};
    use crate::model::expfam::MvNormalInfo;
    use crate::model::target::{grad_log_joint, log_joint, max_gradient_error};
    use crate::rng::Streams;
    use alloc::vec;
    use rand::Rng;

    fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn random_spec(d: usize, shards: usize, seed: u64) -> GaussianModelSpec {
        let mut rng = Streams::new(seed).stream(&[0]);
        let prior = random_spd(d, &mut rng);
        let covs = (0..shards).map(|_| random_spd(d, &mut rng)).collect();
        let obs = (0..shards).map(|_| DVector::from_fn(d, |_, _| 4.0 * rng.random::<f64>() - 2.0)).collect();
        GaussianModelSpec::new(prior, covs, obs).unwrap()
    }

    #[test]
    fn scalar_closed_forms() {
        let spec = GaussianModelSpec::scalar(1.0, 1.0, &[2.0]).unwrap();
        let (m, c) = spec.posterior().unwrap();
        assert!((c[(0, 0)] - 0.5).abs() < 1e-15 && (m[0] - 1.0).abs() < 1e-15);
        let spec = GaussianModelSpec::scalar(1.0, 1.0, &[2.0, -7.0]).unwrap();
        let (m, c) = spec.subposterior(0).unwrap();
        assert!((c[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!(spec.subposterior(2).is_err());
    }

    #[test]
    fn no_shards_gives_prior() {
        let prior = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let spec = GaussianModelSpec::new(prior.clone(), vec![], vec![]).unwrap();
        let (m, c) = spec.posterior().unwrap();
        assert_eq!(m, DVector::zeros(2));
        assert!((c - prior).amax() < 1e-14);
    }

    #[test]
    fn singular_shard_reports_index() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = GaussianModelSpec::new(
            DMatrix::identity(2, 2),
            vec![DMatrix::identity(2, 2), bad],
            vec![DVector::zeros(2), DVector::zeros(2)],
        )
        .unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite { index: 2 });
    }

    #[test]
    fn single_shard_subposterior_is_posterior() {
        let spec = random_spec(3, 1, 4);
        let (m1, c1) = spec.posterior().unwrap();
        let (m2, c2) = spec.subposterior(0).unwrap();
        assert!((m1 - m2).amax() < 1e-12 && (c1 - c2).amax() < 1e-12);
    }

    #[test]
    fn posterior_matches_independent_dense_solve() {
        let spec = random_spec(2, 5, 8);
        // Solve the normal equations with LU rather than Cholesky.
        let mut prec = spec.prior_cov().clone().lu().try_inverse().unwrap();
        let mut h = DVector::zeros(2);
        for j in 0..spec.n_shards() {
            let pj = spec.shard_cov(j).clone().lu().try_inverse().unwrap();
            h += &pj * spec.shard_obs(j);
            prec += pj;
        }
        let mean = prec.clone().lu().solve(&h).unwrap();
        let cov = prec.lu().try_inverse().unwrap();
        let (m, c) = spec.posterior().unwrap();
        assert!((m - mean).amax() < 1e-12);
        assert!((c - cov).amax() < 1e-12);
    }

    #[test]
    fn posterior_is_composition_of_conjugate_updates() {
        let spec = random_spec(2, 4, 9);
        let prior_prec = linalg::spd_inverse(spec.prior_cov(), 0).unwrap();
        let mut eta = MvNormalInfo::join(&DVector::zeros(2), &prior_prec);
        for j in 0..spec.n_shards() {
            let pair = MvNormalMean::new(spec.shard_cov(j)).unwrap();
            eta = conjugate_posterior_update(&pair, &eta, &[spec.shard_obs(j).as_slice()]).unwrap();
            assert_eq!(pair.prior().stat_dim(), 6);
        }
        let (m, c) = MvNormalInfo { d: 2 }.moments(&eta).unwrap();
        let (pm, pc) = spec.posterior().unwrap();
        assert!((m - pm).amax() < 1e-10 && (c - pc).amax() < 1e-10);
    }

    #[test]
    fn subposterior_product_is_proportional_to_posterior() {
        let spec = random_spec(2, 3, 10);
        let mut rng = Streams::new(3).stream(&[1]);
        let mut diffs = vec![];
        for _ in 0..5 {
            let theta = [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            let prod: f64 = (0..3).map(|j| spec.log_subposterior_density(j, &theta).unwrap()).sum();
            diffs.push(prod - spec.log_posterior_density(&theta).unwrap());
        }
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn shard_target_agrees_with_closed_form() {
        let spec = random_spec(2, 6, 12);
        let target = spec.target();
        let a = [0.3, -0.4];
        let b = [-1.0, 0.8];
        let lhs = log_joint(&target, &a).unwrap() - log_joint(&target, &b).unwrap();
        let rhs = spec.log_posterior_density(&a).unwrap() - spec.log_posterior_density(&b).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        let (mode, _) = spec.posterior().unwrap();
        let g = grad_log_joint(&target, mode.as_slice()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        assert!(max_gradient_error(&target, &a) < 1e-5);
    }
}
