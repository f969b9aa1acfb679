//! Weierstrass-transform sampling: each shard keeps a local copy `ξ_j` of
//! the parameter, tied to a global `θ` by a Gaussian kernel of bandwidth
//! `h`. The augmented model
//! `π_h(θ, ξ) ∝ Π_j N(ξ_j; θ, h²) f_j(ξ_j)`
//! recovers the posterior as `h → 0`; shards only talk when `θ` is refreshed.
//!
//! Multivariate parameters use independent per-coordinate bandwidths.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::linalg;
use crate::mcmc::SampleBuffer;
use crate::model::{log_joint, FactoredTarget, GaussianModelSpec};
use crate::rng::{tag, Streams};
use crate::sim::{LatencyModel, SimCluster, SimStats, TraceEvent};
use crate::{arg, Error, Result};

/// `θ`, the local copies `ξ_j` and the kernel bandwidths.
#[derive(Clone, Debug, PartialEq)]
pub struct WeierstrassState {
    pub theta: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    h: Vec<f64>,
}

impl WeierstrassState {
    /// All copies start at `theta`.
    pub fn new(theta: Vec<f64>, shards: usize, h: Vec<f64>) -> Result<Self> {
        if h.len() != theta.len() || h.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(arg("bandwidths must be positive, one per coordinate"));
        }
        if shards == 0 {
            return Err(arg("need at least one shard"));
        }
        Ok(Self { xi: vec![theta.clone(); shards], theta, h })
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }
}

/// `θ | ξ ~ N(ξ̄, h²/J)` per coordinate.
pub fn theta_update(state: &WeierstrassState, rng: &mut dyn RngCore) -> Vec<f64> {
    let j = state.xi.len() as f64;
    (0..state.theta.len())
        .map(|i| {
            let xbar = state.xi.iter().map(|x| x[i]).sum::<f64>() / j;
            let z: f64 = StandardNormal.sample(rng);
            xbar + state.h[i] / libm::sqrt(j) * z
        })
        .collect()
}

/// The subposterior factor `f_j` of one shard.
pub enum LocalFactor<'a> {
    /// Constant density.
    Flat,
    /// Independent Gaussian coordinates; `ξ_j` is drawn exactly.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// General log density; `ξ_j` moves by random-walk MH.
    Density(&'a dyn FactoredTarget),
}

impl LocalFactor<'_> {
    fn work_units(&self, inner_steps: usize) -> u64 {
        match self {
            LocalFactor::Density(t) => (inner_steps * (t.n_data() + 1)) as u64,
            _ => 1,
        }
    }
}

/// Gaussian subposterior factors of a model with diagonal subposterior
/// covariances (for example any scalar model).
pub fn gaussian_factors(spec: &GaussianModelSpec) -> Result<Vec<LocalFactor<'static>>> {
    (0..spec.n_shards())
        .map(|j| {
            let (m, c) = spec.subposterior(j)?;
            if (0..c.nrows()).any(|a| (0..c.ncols()).any(|b| a != b && c[(a, b)] != 0.0)) {
                return Err(Error::Unsupported("non-diagonal subposterior covariance".into()));
            }
            Ok(LocalFactor::Gaussian { mean: linalg::to_vec(&m), var: c.diagonal().iter().copied().collect() })
        })
        .collect()
}

/// Update `ξ_j` given `θ`: exact for flat and Gaussian factors, otherwise
/// `inner_steps` random-walk MH steps with per-coordinate scale `rw_scale`
/// on `log f_j(ξ) − Σ (ξ_i − θ_i)² / (2 h_i²)`.
pub fn xi_update(
    state: &WeierstrassState,
    j: usize,
    factor: &LocalFactor<'_>,
    inner_steps: usize,
    rw_scale: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if inner_steps == 0 {
        return Err(arg("inner_steps must be at least 1"));
    }
    let (theta, h) = (&state.theta, &state.h);
    let d = theta.len();
    match factor {
        LocalFactor::Flat => Ok((0..d).map(|i| theta[i] + h[i] * gauss(rng)).collect()),
        LocalFactor::Gaussian { mean, var } => {
            if mean.len() != d || var.len() != d {
                return Err(arg("factor dimension mismatch"));
            }
            Ok((0..d)
                .map(|i| {
                    let (pk, pf) = (1.0 / (h[i] * h[i]), 1.0 / var[i]);
                    let prec = pk + pf;
                    (pk * theta[i] + pf * mean[i]) / prec + gauss(rng) / libm::sqrt(prec)
                })
                .collect())
        }
        LocalFactor::Density(target) => {
            if rw_scale.len() != d || target.dim() != d {
                return Err(arg("factor dimension mismatch"));
            }
            let coupling = |x: &[f64]| -> f64 {
                (0..d).map(|i| -0.5 * (x[i] - theta[i]) * (x[i] - theta[i]) / (h[i] * h[i])).sum()
            };
            let mut x = state.xi[j].clone();
            let mut cur = log_joint(*target, &x)? + coupling(&x);
            for _ in 0..inner_steps {
                let prop: Vec<f64> = (0..d).map(|i| x[i] + rw_scale[i] * gauss(rng)).collect();
                let u: f64 = rng.random();
                let next = log_joint(*target, &prop).map(|v| v + coupling(&prop)).unwrap_or(f64::NEG_INFINITY);
                if libm::log(u) < next - cur {
                    x = prop;
                    cur = next;
                }
            }
            Ok(x)
        }
    }
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// The simulator only counts these rounds; no payload travels.
struct Round;

impl crate::sim::Payload for Round {
    fn kind(&self) -> &'static str {
        "round"
    }
}

/// Settings for [`weierstrass_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeierstrassConfig {
    pub h: Vec<f64>,
    /// MH steps per `ξ_j` update for non-Gaussian factors.
    pub inner_steps: usize,
    /// `ξ` updates between `θ` refreshes; 1 is the exact Gibbs sampler,
    /// larger values trade accuracy for fewer synchronizations.
    pub sync_every: usize,
    /// Random-walk scale for non-Gaussian factors; defaults to `h`.
    pub rw_scale: Option<Vec<f64>>,
}

impl WeierstrassConfig {
    pub fn new(h: Vec<f64>) -> Self {
        Self { h, inner_steps: 5, sync_every: 1, rw_scale: None }
    }
}

#[derive(Clone, Debug)]
pub struct WeierstrassRun {
    /// `θ` after every round.
    pub draws: SampleBuffer,
    pub stats: SimStats,
    pub trace: Vec<TraceEvent>,
}

/// Weierstrass Gibbs on the simulated cluster: each round broadcasts `θ`,
/// updates every `ξ_j` on worker `j`, gathers them and redraws `θ`.
/// Worker `j` in round `r` uses the stream `(r, j)` of the noise family;
/// `θ` uses `(r)` of the aggregation family.
pub fn weierstrass_run(
    factors: &[LocalFactor<'_>],
    init: Vec<f64>,
    cfg: &WeierstrassConfig,
    rounds: usize,
    streams: &Streams,
    latency: LatencyModel,
) -> Result<WeierstrassRun> {
    if cfg.sync_every == 0 {
        return Err(arg("sync_every must be at least 1"));
    }
    let d = init.len();
    let rw = cfg.rw_scale.clone().unwrap_or_else(|| cfg.h.clone());
    let mut state = WeierstrassState::new(init, factors.len(), cfg.h.clone())?;
    let (noise, agg) = (streams.child(tag::NOISE), streams.child(tag::AGGREGATE));
    let mut cluster = SimCluster::<Round>::new(factors.len(), latency, *streams);
    let mut draws = SampleBuffer::with_capacity(d, rounds);
    for r in 0..rounds as u64 {
        cluster.bsp_superstep(
            &mut state,
            |j, s: &WeierstrassState| {
                let mut rng = noise.stream(&[r, j as u64]);
                let mut local = s.clone();
                for _ in 0..cfg.sync_every {
                    local.xi[j] = xi_update(&local, j, &factors[j], cfg.inner_steps, &rw, &mut rng)?;
                }
                Ok((core::mem::take(&mut local.xi[j]), cfg.sync_every as u64 * factors[j].work_units(cfg.inner_steps)))
            },
            |s, xs| {
                s.xi = xs;
                s.theta = theta_update(s, &mut agg.stream(&[r]));
                Ok(())
            },
        )?;
        draws.push(&state.theta, true);
    }
    Ok(WeierstrassRun { draws, stats: cluster.stats(), trace: cluster.trace().to_vec() })
}

/// Exact `θ`-marginal of the augmented model for scalar Gaussian factors
/// `f_j = N(m_j, v_j)`, from the dense joint precision of `(θ, ξ_1..ξ_J)`.
pub fn augmented_gaussian_marginal(means: &[f64], vars: &[f64], h: f64) -> Result<(f64, f64)> {
    let j = means.len();
    if j == 0 || vars.len() != j {
        return Err(arg("need one variance per mean"));
    }
    let k = 1.0 / (h * h);
    let mut prec = DMatrix::zeros(j + 1, j + 1);
    let mut lin = nalgebra::DVector::zeros(j + 1);
    prec[(0, 0)] = j as f64 * k;
    for s in 0..j {
        prec[(0, s + 1)] = -k;
        prec[(s + 1, 0)] = -k;
        prec[(s + 1, s + 1)] = k + 1.0 / vars[s];
        lin[s + 1] = means[s] / vars[s];
    }
    let cov = linalg::spd_inverse(&prec, 0)?;
    let mean = &cov * lin;
    Ok((mean[0], cov[(0, 0)]))
}
