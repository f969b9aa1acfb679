use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::chain::{acceptance_log_ratio, ChainState, MhOutcome};
use super::proposal::RandomWalk;
use crate::linalg;
use crate::model::{log_joint, FactoredTarget};
use crate::{arg, Result};

/// Stochastic-approximation update of a running mean and covariance:
/// `μ += γ(θ - μ)`, `Σ += γ((θ - μ)(θ - μ)ᵀ - Σ)` with the old `μ`.
pub fn adaptive_proposal_update(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    theta: &[f64],
    gamma: f64,
) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(arg("adaptation gain must lie in (0, 1]"));
    }
    let diff = DVector::from_column_slice(theta) - &*mean;
    *cov = &*cov + (&diff * diff.transpose() - &*cov) * gamma;
    *mean += diff * gamma;
    Ok(())
}

/// Adaptive random-walk Metropolis with proposal `N(θ, s Σ_t + εI)`, where
/// `Σ_t` follows [`adaptive_proposal_update`] with gain `γ_t = t^{-α}`.
#[derive(Clone, Debug)]
pub struct AdaptiveMetropolis {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    exponent: f64,
    scale: f64,
    jitter: f64,
    freeze_after: Option<u64>,
    t: u64,
}

impl AdaptiveMetropolis {
    /// `exponent` is `α ∈ [1/2, 1)`. The scale defaults to `2.38²/d`.
    pub fn new(init_mean: Vec<f64>, init_cov: DMatrix<f64>, exponent: f64) -> Result<Self> {
        if !(0.5..1.0).contains(&exponent) {
            return Err(arg("adaptation exponent must lie in [1/2, 1)"));
        }
        let d = init_mean.len();
        linalg::cholesky(&init_cov, 0)?;
        Ok(Self {
            mean: DVector::from_vec(init_mean),
            cov: init_cov,
            exponent,
            scale: 2.38 * 2.38 / d as f64,
            jitter: 1e-8,
            freeze_after: None,
            t: 0,
        })
    }

    /// Stop adapting after `n` steps.
    pub fn freeze_after(mut self, n: u64) -> Self {
        self.freeze_after = Some(n);
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze_after.is_some_and(|n| self.t >= n)
    }

    /// One MH step with the current proposal, followed by adaptation.
    pub fn step<T: FactoredTarget + ?Sized>(
        &mut self,
        target: &T,
        state: &mut ChainState,
        rng: &mut dyn RngCore,
    ) -> Result<MhOutcome> {
        let d = self.mean.len();
        let c = &self.cov * self.scale + DMatrix::identity(d, d) * self.jitter;
        let l = linalg::cholesky(&linalg::symmetrize(c), 0)?.l();
        let z = linalg::standard_normal_vec(d, rng);
        let prop: Vec<f64> = (DVector::from_column_slice(&state.theta) + l * z).iter().copied().collect();
        let u: f64 = rng.random();
        let log_u = libm::log(u);
        let proposed = log_joint(target, &prop).unwrap_or(f64::NEG_INFINITY);
        // The Gaussian proposal is symmetric, so any symmetric proposal
        // object gives the right ratio.
        let sym = RandomWalk::isotropic(d, 1.0);
        let log_alpha = acceptance_log_ratio(&sym, &state.theta, state.log_joint, &prop, proposed);
        let accepted = log_u < log_alpha;
        if accepted {
            state.theta.clone_from(&prop);
            state.log_joint = proposed;
        }
        state.iter += 1;
        state.rng_cursor += 1;
        if !self.is_frozen() {
            self.t += 1;
            let gamma = libm::pow((self.t + 1) as f64, -self.exponent);
            adaptive_proposal_update(&mut self.mean, &mut self.cov, &state.theta, gamma)?;
        }
        Ok(MhOutcome { accepted, log_alpha, proposal: prop, log_u })
    }
}
