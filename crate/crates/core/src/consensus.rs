//! Consensus Monte Carlo: sample each shard's subposterior independently,
//! then combine the draws once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::linalg::{self, mvn_sample};
use crate::mcmc::{run_mh, Proposal, SampleBuffer, ShardPlan};
use crate::model::{FactoredTarget, GaussianModelSpec};
use crate::rng::Streams;
use crate::sim::{unhandled, Ctx, Handler, LatencyModel, Message, Payload, SimCluster, SimStats, TraceEvent};
use crate::special::log_sum_exp;
use crate::{arg, Error, Result};

/// Shard `j` of a target with the prior tempered to the power `1/J`.
#[derive(Clone, Debug)]
pub struct SubposteriorTarget<'a, T: ?Sized> {
    target: &'a T,
    shard: &'a [usize],
    shards: usize,
}

/// The subposterior of shard `j` under `plan`.
pub fn subposterior_target<'a, T: FactoredTarget + ?Sized>(
    target: &'a T,
    plan: &'a ShardPlan,
    j: usize,
) -> Result<SubposteriorTarget<'a, T>> {
    if j >= plan.len() {
        return Err(arg("shard index out of range"));
    }
    Ok(SubposteriorTarget { target, shard: plan.shard(j), shards: plan.len() })
}

impl<T: FactoredTarget + ?Sized> FactoredTarget for SubposteriorTarget<'_, T> {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn n_data(&self) -> usize {
        self.shard.len()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.target.log_prior(theta) / self.shards as f64
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        self.target.log_lik_term(self.shard[n], theta)
    }
    fn grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        self.target.grad_log_prior(theta, out);
        out.iter_mut().for_each(|g| *g /= self.shards as f64);
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        self.target.grad_log_lik_term(self.shard[n], theta, out)
    }
}

/// Draws from each of `J` subposteriors, `T` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct SubposteriorDraws {
    shards: Vec<SampleBuffer>,
}

impl SubposteriorDraws {
    pub fn new(shards: Vec<SampleBuffer>) -> Result<Self> {
        let first = shards.first().ok_or_else(|| arg("no shards"))?;
        let (t, d) = (first.len(), first.dim());
        if t == 0 || shards.iter().any(|s| s.len() != t || s.dim() != d) {
            return Err(arg("every shard needs the same non-zero number of draws and dimension"));
        }
        Ok(Self { shards })
    }

    pub fn n_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn draws_per_shard(&self) -> usize {
        self.shards[0].len()
    }

    pub fn dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn shard(&self, j: usize) -> &SampleBuffer {
        &self.shards[j]
    }

    fn moments(&self) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        self.shards
            .iter()
            .map(|s| Ok((linalg::sample_mean(s.as_slice(), s.dim()), linalg::sample_cov(s.as_slice(), s.dim())?)))
            .collect()
    }
}

fn shard_numeric(j: usize) -> Error {
    Error::Numeric(format!("sample covariance of shard {j} is not invertible"))
}

fn diagonal_of(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&m.diagonal())
}

/// Options for weighted-average consensus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConsensusOptions {
    /// Restrict weights to diagonal matrices (per-dimension precisions).
    pub diagonal: bool,
    /// Treat `Σ̄_j⁻¹ - Σ0⁻¹/J` as the shard likelihood precision, which makes
    /// the combination exact for Gaussian models. When false the subposterior
    /// covariance is plugged in for the likelihood covariance directly.
    pub prior_correction: bool,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        Self { diagonal: false, prior_correction: true }
    }
}

/// Weight matrices `W_j = Σ (Σ0⁻¹/J + Λ_j)` and `Σ = (Σ0⁻¹ + Σ_j Λ_j)⁻¹`,
/// where `Λ_j` is the (estimated) likelihood precision of shard `j`.
pub fn consensus_weights(
    prior_cov: &DMatrix<f64>,
    sub_covs: &[DMatrix<f64>],
    opts: ConsensusOptions,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let j_total = sub_covs.len() as f64;
    let prior = if opts.diagonal { diagonal_of(prior_cov) } else { prior_cov.clone() };
    let prior_prec = linalg::spd_inverse(&prior, 0)?;
    let mut liks = Vec::with_capacity(sub_covs.len());
    for (j, c) in sub_covs.iter().enumerate() {
        let c = if opts.diagonal { diagonal_of(c) } else { c.clone() };
        let prec = linalg::spd_inverse(&linalg::symmetrize(c), j + 1).map_err(|_| shard_numeric(j))?;
        liks.push(if opts.prior_correction { prec - &prior_prec / j_total } else { prec });
    }
    let mut total = prior_prec.clone();
    liks.iter().for_each(|l| total += l);
    let sigma = linalg::spd_inverse(&linalg::symmetrize(total), 0)
        .map_err(|_| Error::Numeric("combined precision is not positive definite".into()))?;
    let weights = liks.iter().map(|l| &sigma * (&prior_prec / j_total + l)).collect();
    Ok((weights, sigma))
}

/// Weighted-average consensus: `θ̂_t = Σ_j W_j θ_{j,t}`, pairing draws by index.
pub fn consensus_weighted(
    draws: &SubposteriorDraws,
    prior_cov: &DMatrix<f64>,
    opts: ConsensusOptions,
) -> Result<SampleBuffer> {
    let d = draws.dim();
    if prior_cov.nrows() != d {
        return Err(arg("prior covariance has the wrong dimension"));
    }
    if draws.n_shards() == 1 {
        return Ok(draws.shard(0).clone());
    }
    let covs: Vec<DMatrix<f64>> = draws.moments()?.into_iter().map(|(_, c)| c).collect();
    let (weights, _) = consensus_weights(prior_cov, &covs, opts)?;
    let t_len = draws.draws_per_shard();
    let mut out = SampleBuffer::with_capacity(d, t_len);
    for t in 0..t_len {
        let mut acc = DVector::zeros(d);
        for (j, w) in weights.iter().enumerate() {
            acc += w * DVector::from_column_slice(draws.shard(j).row(t));
        }
        out.push(acc.as_slice(), true);
    }
    Ok(out)
}

/// A Gaussian ready for sampling.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky(&cov, 0)?.l();
        Ok(Self { mean, cov, chol })
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> SampleBuffer {
        let mut out = SampleBuffer::with_capacity(self.mean.len(), n);
        for _ in 0..n {
            out.push(mvn_sample(&self.mean, &self.chol, rng).as_slice(), true);
        }
        out
    }
}

/// Product of Gaussians: `Σ = (Σ_j Σ_j⁻¹)⁻¹`, `μ = Σ Σ_j Σ_j⁻¹ μ_j`.
pub fn gaussian_product(parts: &[(DVector<f64>, DMatrix<f64>)]) -> Result<GaussianFit> {
    let d = parts.first().ok_or_else(|| arg("empty product"))?.0.len();
    let mut prec = DMatrix::zeros(d, d);
    let mut h = DVector::zeros(d);
    for (j, (m, c)) in parts.iter().enumerate() {
        let p = linalg::spd_inverse(&linalg::symmetrize(c.clone()), j + 1).map_err(|_| shard_numeric(j))?;
        h += &p * m;
        prec += p;
    }
    let cov = linalg::symmetrize(linalg::spd_inverse(&linalg::symmetrize(prec), 0)?);
    GaussianFit::new(&cov * h, cov)
}

/// Fit a Gaussian to every shard and return their product.
pub fn consensus_gaussian_fit(draws: &SubposteriorDraws) -> Result<GaussianFit> {
    gaussian_product(&draws.moments()?)
}

/// Kernel bandwidth for the KDE product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Per shard and dimension: `T^{-1/(d+4)}` times the sample standard deviation.
    Scott,
    Fixed(f64),
}

/// Per-shard, per-dimension kernel precisions.
fn kernel_precisions(draws: &SubposteriorDraws, bw: Bandwidth) -> Result<Vec<Vec<f64>>> {
    let d = draws.dim();
    match bw {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(arg("bandwidth must be positive"));
            }
            Ok(vec![vec![1.0 / (h * h); d]; draws.n_shards()])
        }
        Bandwidth::Scott => {
            let factor = libm::pow(draws.draws_per_shard() as f64, -1.0 / (d as f64 + 4.0));
            draws
                .moments()?
                .iter()
                .enumerate()
                .map(|(j, (_, c))| {
                    (0..d)
                        .map(|i| {
                            let h = factor * libm::sqrt(c[(i, i)]);
                            if h > 0.0 {
                                Ok(1.0 / (h * h))
                            } else {
                                Err(Error::Degenerate(format!("shard {j} has zero spread in dimension {i}")))
                            }
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Log weight (up to a constant) of the mixture component picking draw
/// `t_j` from every shard.
fn component_log_weight(draws: &SubposteriorDraws, prec: &[Vec<f64>], idx: &[usize]) -> f64 {
    let d = draws.dim();
    let mut w = 0.0;
    for i in 0..d {
        let (mut p_sum, mut h, mut q) = (0.0, 0.0, 0.0);
        for (j, &t) in idx.iter().enumerate() {
            let mu = draws.shard(j).row(t)[i];
            let p = prec[j][i];
            p_sum += p;
            h += p * mu;
            q += p * mu * mu;
        }
        w += -0.5 * q + 0.5 * h * h / p_sum;
    }
    w
}

/// Normalised weights of all `T^J` product components (shard 0 varies
/// slowest). Only for small problems.
pub fn kde_mixture_weights(draws: &SubposteriorDraws, bandwidth: Bandwidth) -> Result<Vec<f64>> {
    let (t_len, j_total) = (draws.draws_per_shard(), draws.n_shards());
    let count = libm::pow(t_len as f64, j_total as f64);
    if count > 1e7 {
        return Err(Error::Capacity { size: count as usize, capacity: 10_000_000 });
    }
    let prec = kernel_precisions(draws, bandwidth)?;
    let mut idx = vec![0usize; j_total];
    let mut logs = Vec::with_capacity(count as usize);
    loop {
        logs.push(component_log_weight(draws, &prec, &idx));
        let mut k = j_total;
        loop {
            if k == 0 {
                let z = log_sum_exp(&logs);
                return Ok(logs.iter().map(|l| libm::exp(l - z)).collect());
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < t_len {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Output of [`consensus_kde`].
#[derive(Clone, Debug)]
pub struct KdeRun {
    pub samples: SampleBuffer,
    /// Component indices `(t_1..t_J)` of every emitted draw, row-major.
    pub components: Vec<usize>,
}

/// Sample the product of per-shard Gaussian KDEs by Gibbs sampling over the
/// component indices. Each sweep resamples every `t_j` given the others and
/// emits one draw from the selected product Gaussian. Indices start uniform.
pub fn consensus_kde(
    draws: &SubposteriorDraws,
    bandwidth: Bandwidth,
    n_out: usize,
    rng: &mut dyn RngCore,
) -> Result<KdeRun> {
    let (t_len, j_total, d) = (draws.draws_per_shard(), draws.n_shards(), draws.dim());
    let prec = kernel_precisions(draws, bandwidth)?;
    let p_sum: Vec<f64> = (0..d).map(|i| prec.iter().map(|p| p[i]).sum()).collect();
    let mut idx: Vec<usize> = (0..j_total).map(|_| rng.random_range(0..t_len)).collect();
    let mut samples = SampleBuffer::with_capacity(d, n_out);
    let mut components = Vec::with_capacity(n_out * j_total);
    let mut logw = vec![0.0; t_len];
    let mut h = vec![0.0; d];
    for _ in 0..n_out {
        for j in 0..j_total {
            // Linear terms of the other shards.
            h.iter_mut().for_each(|v| *v = 0.0);
            for (k, &t) in idx.iter().enumerate() {
                if k != j {
                    let row = draws.shard(k).row(t);
                    (0..d).for_each(|i| h[i] += prec[k][i] * row[i]);
                }
            }
            let shard = draws.shard(j);
            for (t, w) in logw.iter_mut().enumerate() {
                let row = shard.row(t);
                *w = (0..d)
                    .map(|i| {
                        let (p, mu) = (prec[j][i], row[i]);
                        let s = h[i] + p * mu;
                        -0.5 * p * mu * mu + 0.5 * s * s / p_sum[i]
                    })
                    .sum();
            }
            let z = log_sum_exp(&logw);
            if !z.is_finite() {
                return Err(Error::Numeric("all KDE component weights underflowed; use a larger bandwidth".into()));
            }
            let mut u: f64 = rng.random();
            let mut pick = t_len - 1;
            for (t, w) in logw.iter().enumerate() {
                u -= libm::exp(w - z);
                if u < 0.0 {
                    pick = t;
                    break;
                }
            }
            idx[j] = pick;
        }
        let mut theta = vec![0.0; d];
        for i in 0..d {
            let hsum: f64 = idx.iter().enumerate().map(|(k, &t)| prec[k][i] * draws.shard(k).row(t)[i]).sum();
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            theta[i] = hsum / p_sum[i] + z / libm::sqrt(p_sum[i]);
        }
        samples.push(&theta, true);
        components.extend_from_slice(&idx);
    }
    Ok(KdeRun { samples, components })
}

/// `T` exact draws from each subposterior of a Gaussian model; shard `j`
/// uses the stream keyed by `j`.
pub fn exact_gaussian_subposterior_draws(spec: &GaussianModelSpec, t_len: usize, streams: &Streams) -> Result<SubposteriorDraws> {
    let shards = (0..spec.n_shards())
        .map(|j| {
            let (m, c) = spec.subposterior(j)?;
            GaussianFit::new(m, c).map(|g| g.sample(t_len, &mut streams.stream(&[j as u64])))
        })
        .collect::<Result<Vec<_>>>()?;
    SubposteriorDraws::new(shards)
}

#[derive(Clone, Debug)]
enum ConsensusMsg {
    Start,
    Draws(usize, SampleBuffer),
}

impl Payload for ConsensusMsg {
    fn kind(&self) -> &'static str {
        match self {
            ConsensusMsg::Start => "start",
            ConsensusMsg::Draws(..) => "draws",
        }
    }
}

struct ShardWorkers<'a, T: ?Sized, P: ?Sized> {
    target: &'a T,
    plan: &'a ShardPlan,
    proposal: &'a P,
    init: &'a [f64],
    t_len: usize,
    streams: &'a Streams,
    results: Vec<Option<SampleBuffer>>,
}

impl<T: FactoredTarget + ?Sized, P: Proposal + ?Sized> Handler<ConsensusMsg> for ShardWorkers<'_, T, P> {
    fn handle(&mut self, msg: Message<ConsensusMsg>, ctx: &mut Ctx<'_, ConsensusMsg>) -> Result<()> {
        let master = self.plan.len();
        match msg.payload {
            ConsensusMsg::Start if ctx.node() < master => {
                let j = ctx.node();
                let sub = subposterior_target(self.target, self.plan, j)?;
                let (draws, _) = run_mh(&sub, self.proposal, self.init.to_vec(), self.t_len, self.streams, j as u64)?;
                ctx.charge((self.t_len * (sub.n_data() + 1)) as u64);
                ctx.send(master, ConsensusMsg::Draws(j, draws));
            }
            ConsensusMsg::Draws(j, draws) if ctx.node() == master => self.results[j] = Some(draws),
            _ => return Err(unhandled(&msg)),
        }
        Ok(())
    }
}

/// Output of [`run_subposterior_mh`].
#[derive(Clone, Debug)]
pub struct ShardRun {
    pub draws: SubposteriorDraws,
    pub trace: Vec<TraceEvent>,
    pub stats: SimStats,
}

/// Run MH on every subposterior on its own simulated worker; workers only
/// talk to the master, once, when they are done. Shard `j` uses chain index `j`.
pub fn run_subposterior_mh<T, P>(
    target: &T,
    plan: &ShardPlan,
    proposal: &P,
    init: &[f64],
    t_len: usize,
    streams: &Streams,
    latency: LatencyModel,
) -> Result<ShardRun>
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    let j_total = plan.len();
    if j_total == 0 {
        return Err(arg("no shards"));
    }
    let mut cluster = SimCluster::new(j_total, latency, *streams);
    for j in 0..j_total {
        cluster.inject(j_total, j, ConsensusMsg::Start);
    }
    let mut workers =
        ShardWorkers { target, plan, proposal, init, t_len, streams, results: vec![None; j_total] };
    cluster.run_until_quiescent(&mut workers)?;
    let shards = workers.results.into_iter().map(|r| r.ok_or_else(|| Error::Logic("missing shard".into()))).collect::<Result<_>>()?;
    Ok(ShardRun { draws: SubposteriorDraws::new(shards)?, trace: cluster.trace().to_vec(), stats: cluster.stats() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{total_variation, RandomWalk};
    use crate::model::{log_joint, log_likelihood};
    use crate::zoo::GaussianMeanModel;

    fn spec4() -> GaussianModelSpec {
        let prior = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let covs = (0..4)
            .map(|j| DMatrix::from_row_slice(2, 2, &[0.5 + 0.1 * j as f64, 0.1, 0.1, 0.8]))
            .collect();
        let obs = (0..4).map(|j| DVector::from_row_slice(&[1.0 + 0.2 * j as f64, -0.5])).collect();
        GaussianModelSpec::new(prior, covs, obs).unwrap()
    }

    #[test]
    fn subposterior_algebra() {
        let m = GaussianMeanModel::generate(&[0.3, 0.1], 2.0, 1.5, 40, &Streams::new(1));
        let one = ShardPlan::contiguous(40, 1);
        let full = subposterior_target(&m, &one, 0).unwrap();
        let plan = ShardPlan::contiguous(40, 4);
        let mut rng = Streams::new(2).stream(&[0]);
        for _ in 0..5 {
            let th = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let exact = log_joint(&m, &th).unwrap();
            assert!((log_joint(&full, &th).unwrap() - exact).abs() < 1e-10);
            let sum: f64 = (0..4).map(|j| log_joint(&subposterior_target(&m, &plan, j).unwrap(), &th).unwrap()).sum();
            assert!((sum - exact).abs() < 1e-9);
        }
        // Gaussian shard densities differ from the closed form by a constant.
        let spec = spec4();
        let t = spec.target();
        let plan = ShardPlan::contiguous(4, 4);
        let sub = subposterior_target(&t, &plan, 2).unwrap();
        let offs: Vec<f64> = [[0.0, 0.0], [1.0, -2.0], [0.3, 0.7]]
            .iter()
            .map(|th| log_joint(&sub, th).unwrap() - spec.log_subposterior_density(2, th).unwrap())
            .collect();
        assert!(offs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-10));
        let _ = log_likelihood(&t, &[0.0, 0.0]);
    }

    #[test]
    fn single_shard_weighted_is_identity() {
        let spec = GaussianModelSpec::scalar(1.0, 0.5, &[0.4]).unwrap();
        let draws = exact_gaussian_subposterior_draws(&spec, 100, &Streams::new(3)).unwrap();
        let out = consensus_weighted(&draws, spec.prior_cov(), ConsensusOptions::default()).unwrap();
        assert_eq!(&out, draws.shard(0));
        let cov = linalg::sample_cov(draws.shard(0).as_slice(), 1).unwrap();
        let (w, _) = consensus_weights(spec.prior_cov(), &[cov], ConsensusOptions::default()).unwrap();
        assert!((w[0][(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_weights_reproduce_posterior_covariance() {
        let spec = spec4();
        let (_, post) = spec.posterior().unwrap();
        let subs: Vec<DMatrix<f64>> = (0..4).map(|j| spec.subposterior(j).unwrap().1).collect();
        let (w, sigma) = consensus_weights(spec.prior_cov(), &subs, ConsensusOptions::default()).unwrap();
        assert!((&sigma - &post).amax() < 1e-10);
        let mut cov = DMatrix::zeros(2, 2);
        let mut mean = DVector::zeros(2);
        for j in 0..4 {
            cov += &w[j] * &subs[j] * w[j].transpose();
            mean += &w[j] * spec.subposterior(j).unwrap().0;
        }
        assert!((&cov - &post).amax() < 1e-10);
        assert!((mean - spec.posterior().unwrap().0).amax() < 1e-10);
    }

    #[test]
    fn weighted_consensus_on_gaussian_model() {
        let spec = spec4();
        let (mu, sigma) = spec.posterior().unwrap();
        let draws = exact_gaussian_subposterior_draws(&spec, 10_000, &Streams::new(4)).unwrap();
        let out = consensus_weighted(&draws, spec.prior_cov(), ConsensusOptions::default()).unwrap();
        let m = linalg::sample_mean(out.as_slice(), 2);
        let c = linalg::sample_cov(out.as_slice(), 2).unwrap();
        for i in 0..2 {
            assert!((m[i] - mu[i]).abs() < 3.0 * (sigma[(i, i)] / 10_000.0).sqrt());
        }
        assert!(linalg::frobenius_relative(&c, &sigma) < 0.1);
        let diag = consensus_weighted(&draws, spec.prior_cov(), ConsensusOptions { diagonal: true, ..Default::default() });
        assert!(diag.is_ok());
    }

    #[test]
    fn singular_shard_covariance_is_named() {
        let flat = SampleBuffer::from_rows(2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let ok = SampleBuffer::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let draws = SubposteriorDraws::new(vec![ok, flat]).unwrap();
        let err = consensus_weighted(&draws, &DMatrix::identity(2, 2), ConsensusOptions::default()).unwrap_err();
        assert_eq!(err, shard_numeric(1));
    }

    #[test]
    fn gaussian_product_examples() {
        let n = |m: f64, v: f64| (DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
        let g = gaussian_product(&[n(0.0, 1.0), n(0.0, 1.0)]).unwrap();
        assert!((g.mean[0]).abs() < 1e-15 && (g.cov[(0, 0)] - 0.5).abs() < 1e-15);
        let g = gaussian_product(&[n(-1.0, 1.0), n(1.0, 1.0)]).unwrap();
        assert!((g.mean[0]).abs() < 1e-15 && (g.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fit_matches_oracle_within_fit_error() {
        let spec = spec4();
        let (mu, sigma) = spec.posterior().unwrap();
        let t = 10_000;
        let draws = exact_gaussian_subposterior_draws(&spec, t, &Streams::new(5)).unwrap();
        let fit = consensus_gaussian_fit(&draws).unwrap();
        // The fitted mean is a linear map of the shard sample means, so its
        // standard error is that of a posterior sample mean.
        for i in 0..2 {
            assert!((fit.mean[i] - mu[i]).abs() < 3.0 * (sigma[(i, i)] / t as f64).sqrt());
        }
        assert!(linalg::frobenius_relative(&fit.cov, &sigma) < 0.05);
        let s = fit.sample(20_000, &mut Streams::new(6).stream(&[0]));
        assert!((linalg::sample_mean(s.as_slice(), 2) - &fit.mean).amax() < 0.05);
    }

    #[test]
    fn kde_single_shard_is_plain_kde() {
        let spec = GaussianModelSpec::scalar(1.0, 0.5, &[0.8]).unwrap();
        let draws = exact_gaussian_subposterior_draws(&spec, 500, &Streams::new(7)).unwrap();
        let run = consensus_kde(&draws, Bandwidth::Scott, 20_000, &mut Streams::new(8).stream(&[0])).unwrap();
        let m = run.samples.column(0).iter().sum::<f64>() / 20_000.0;
        let base = draws.shard(0).column(0);
        let bm = base.iter().sum::<f64>() / 500.0;
        let sd = (base.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!((m - bm).abs() < 3.0 * sd * (1.0 / 20_000f64).sqrt() * 1.2);
    }

    #[test]
    fn kde_component_frequencies_match_enumeration() {
        let a = SampleBuffer::from_rows(1, vec![-1.0, 0.2, 0.9]).unwrap();
        let b = SampleBuffer::from_rows(1, vec![0.5, -0.4, 1.3]).unwrap();
        let draws = SubposteriorDraws::new(vec![a, b]).unwrap();
        let bw = Bandwidth::Fixed(0.7);
        let exact = kde_mixture_weights(&draws, bw).unwrap();
        let n = 100_000;
        let run = consensus_kde(&draws, bw, n, &mut Streams::new(9).stream(&[0])).unwrap();
        let mut freq = vec![0.0; 9];
        for c in run.components.chunks_exact(2) {
            freq[c[0] * 3 + c[1]] += 1.0 / n as f64;
        }
        assert!(total_variation(&freq, &exact) < 0.02);
    }

    #[test]
    fn wide_kde_tracks_gaussian_fit() {
        let spec = GaussianModelSpec::scalar(100.0, 1.0, &[2.0, 2.2, 1.9]).unwrap();
        let draws = exact_gaussian_subposterior_draws(&spec, 2000, &Streams::new(10)).unwrap();
        let fit = consensus_gaussian_fit(&draws).unwrap();
        let run = consensus_kde(&draws, Bandwidth::Fixed(20.0), 20_000, &mut Streams::new(11).stream(&[0])).unwrap();
        let m = run.samples.column(0).iter().sum::<f64>() / 20_000.0;
        // Sampling noise of the wide kernel is h/√(J n) ≈ 0.08.
        assert!((m - fit.mean[0]).abs() / fit.mean[0] < 0.05 + 3.0 * 20.0 / (3.0 * 20_000f64).sqrt() / 2.0);
        assert!(consensus_kde(&draws, Bandwidth::Fixed(0.0), 1, &mut Streams::new(0).stream(&[0])).is_err());
    }

    #[test]
    fn shard_workers_only_talk_to_master() {
        let m = GaussianMeanModel::generate(&[0.5], 4.0, 1.0, 400, &Streams::new(12));
        let plan = ShardPlan::contiguous(400, 4);
        let q = RandomWalk::isotropic(1, 0.1);
        let run = run_subposterior_mh(&m, &plan, &q, &[0.5], 500, &Streams::new(13), LatencyModel::default()).unwrap();
        assert_eq!(run.draws.n_shards(), 4);
        let master = 4;
        assert!(run.trace.iter().all(|e| e.src == master || e.dst == master));
        assert_eq!(run.trace.iter().filter(|e| e.kind == "draws").count(), 4);
        // Shards run concurrently: the makespan is one shard's work.
        assert!((run.stats.speedup() - 4.0).abs() < 0.01);
    }
}
