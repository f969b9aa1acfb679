//! Approximate Metropolis-Hastings with adaptive data subsampling.
//!
//! The accept test `Λ > ψ` compares the average log-likelihood ratio `Λ`
//! with a threshold `ψ` that carries the uniform draw, the prior and the
//! proposal. `Λ` is estimated from a growing uniformly random subsample
//! until a t-test or a concentration bound says the sign of `Λ̂ - ψ` is
//! settled.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, RngCore};

use crate::mcmc::{ChainState, Proposal, SampleBuffer};
use crate::model::FactoredTarget;
use crate::rng::Streams;
use crate::special::student_t_upper_tail;
use crate::{arg, Error, Result};

/// Running moments of the log-likelihood ratios seen in one test.
#[derive(Clone, Debug)]
pub struct LlrAccumulator {
    n_total: usize,
    m: usize,
    sum: f64,
    sum_sq: f64,
    used: Vec<u64>,
}

impl LlrAccumulator {
    pub fn new(n_total: usize) -> Self {
        Self { n_total, m: 0, sum: 0.0, sum_sq: 0.0, used: vec![0; n_total.div_ceil(64)] }
    }

    /// An accumulator with given raw moments (no index tracking).
    pub fn from_moments(m: usize, mean: f64, mean_sq: f64, n_total: usize) -> Self {
        Self { n_total, m, sum: mean * m as f64, sum_sq: mean_sq * m as f64, used: Vec::new() }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// `Λ̂`, the mean of the ratios seen so far.
    pub fn mean(&self) -> f64 {
        self.sum / self.m as f64
    }

    /// Mean of the squared ratios.
    pub fn mean_sq(&self) -> f64 {
        self.sum_sq / self.m as f64
    }

    /// Sample standard deviation `sqrt(m/(m-1) (mean_sq - mean²))`.
    pub fn std_dev(&self) -> f64 {
        let m = self.m as f64;
        let raw = (self.mean_sq() - self.mean() * self.mean()).max(0.0);
        libm::sqrt(m / (m - 1.0) * raw)
    }

    /// Record the ratio `value` for datum `n`.
    pub fn push(&mut self, n: usize, value: f64) -> Result<()> {
        if n >= self.n_total {
            return Err(arg("datum index out of range"));
        }
        let (w, b) = (n / 64, 1u64 << (n % 64));
        if self.used[w] & b != 0 {
            return Err(Error::Logic(format!("datum {n} used twice in one test")));
        }
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("log-likelihood ratio of datum {n} is {value}")));
        }
        self.used[w] |= b;
        self.m += 1;
        self.sum += value;
        self.sum_sq += value * value;
        Ok(())
    }
}

/// `ℓ_n = log π(x_n | θ') - log π(x_n | θ)`.
pub fn log_lik_ratio<T: FactoredTarget + ?Sized>(target: &T, n: usize, theta: &[f64], prop: &[f64]) -> f64 {
    target.log_lik_term(n, prop) - target.log_lik_term(n, theta)
}

/// Add the ratios of `indices` to the accumulator.
pub fn llr_update<T: FactoredTarget + ?Sized>(
    acc: &mut LlrAccumulator,
    target: &T,
    theta: &[f64],
    prop: &[f64],
    indices: &[usize],
) -> Result<()> {
    for &n in indices {
        acc.push(n, log_lik_ratio(target, n, theta, prop))?;
    }
    Ok(())
}

/// `ψ = (1/N) log[u q(θ'|θ) π0(θ) / (q(θ|θ') π0(θ'))]`.
pub fn mh_log_threshold<T, P>(u: f64, theta: &[f64], prop: &[f64], proposal: &P, target: &T) -> Result<f64>
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    if !(u > 0.0 && u < 1.0) {
        return Err(arg("u must lie in (0, 1)"));
    }
    let n = target.n_data().max(1) as f64;
    Ok((libm::log(u) + log_threshold_offset(theta, prop, proposal, target)) / n)
}

/// `log[q(θ'|θ) π0(θ) / (q(θ|θ') π0(θ'))]`.
fn log_threshold_offset<T, P>(theta: &[f64], prop: &[f64], proposal: &P, target: &T) -> f64
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    let mut a = target.log_prior(theta) - target.log_prior(prop);
    if !proposal.is_symmetric() {
        a += proposal.log_density(prop, theta) - proposal.log_density(theta, prop);
    }
    a
}

/// Stopping rule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    TTest,
    Hoeffding,
    Bernstein,
}

/// User-supplied `C_{θ,θ'}`.
pub type BoundFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// How the range `C_{θ,θ'} ≥ max_n |ℓ_n|` is obtained for concentration rules.
#[derive(Clone)]
pub enum CBound {
    Fixed(f64),
    /// `C = L |θ' - θ|` for log-likelihood terms that are `L`-Lipschitz in θ.
    Lipschitz(f64),
    /// `factor · max |ℓ_n|` over the first `size` points of the step's
    /// permutation (which are then reused by the test).
    Pilot { size: usize, factor: f64 },
    Custom(BoundFn),
}

impl CBound {
    /// The default pilot: 1000 points and a safety factor of 1.5.
    pub fn pilot() -> Self {
        CBound::Pilot { size: 1000, factor: 1.5 }
    }
}

impl fmt::Debug for CBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CBound::Fixed(c) => write!(f, "Fixed({c})"),
            CBound::Lipschitz(l) => write!(f, "Lipschitz({l})"),
            CBound::Pilot { size, factor } => write!(f, "Pilot {{ size: {size}, factor: {factor} }}"),
            CBound::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Configuration of the adaptive stopping rule.
#[derive(Clone, Debug)]
pub struct StopRuleConfig {
    /// Initial batch size `b`.
    pub batch: usize,
    /// Tolerance `ε`.
    pub epsilon: f64,
    pub rule: StopRule,
    /// Exponent `p > 1` of the error schedule.
    pub p: f64,
    /// Batch growth factor `γ ≥ 1`.
    pub gamma: f64,
    pub c_bound: CBound,
    /// Spend the error budget per batch rather than per datum.
    pub per_batch_delta: bool,
}

impl Default for StopRuleConfig {
    fn default() -> Self {
        Self {
            batch: 100,
            epsilon: 0.01,
            rule: StopRule::TTest,
            p: 2.0,
            gamma: 2.0,
            c_bound: CBound::pilot(),
            per_batch_delta: false,
        }
    }
}

impl StopRuleConfig {
    pub fn validate(&self) -> Result<()> {
        let min_batch = if self.rule == StopRule::Hoeffding { 1 } else { 2 };
        if self.batch < min_batch {
            return Err(arg("initial batch is too small for the rule"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(arg("epsilon must lie in (0, 1)"));
        }
        if self.p <= 1.0 {
            return Err(arg("p must exceed 1"));
        }
        if self.gamma < 1.0 {
            return Err(arg("gamma must be at least 1"));
        }
        match self.c_bound {
            CBound::Fixed(c) | CBound::Lipschitz(c) if c <= 0.0 => Err(arg("C bound must be positive")),
            CBound::Pilot { size, factor } if size == 0 || factor <= 0.0 => Err(arg("invalid pilot")),
            _ => Ok(()),
        }
    }
}

/// t-test rule: returns `(stop, ρ)` with `ρ` the one-sided tail of `|t|`.
pub fn ttest_should_stop(acc: &LlrAccumulator, psi: f64, n_total: usize, epsilon: f64) -> Result<(bool, f64)> {
    let m = acc.m();
    if m < 2 {
        return Err(arg("the t-test needs at least two ratios"));
    }
    let sigma = ttest_sigma(acc, n_total);
    let diff = acc.mean() - psi;
    let rho = if sigma == 0.0 {
        if diff == 0.0 {
            0.5
        } else {
            0.0
        }
    } else {
        student_t_upper_tail((diff / sigma).abs(), (m - 1) as f64)
    };
    Ok((rho <= epsilon || m >= n_total, rho))
}

/// `σ̂ = s/√m · sqrt((N - m)/(N - 1))`.
fn ttest_sigma(acc: &LlrAccumulator, n_total: usize) -> f64 {
    let m = acc.m() as f64;
    let n = n_total as f64;
    let fpc = if n_total > 1 { ((n - m) / (n - 1.0)).max(0.0) } else { 0.0 };
    acc.std_dev() / libm::sqrt(m) * libm::sqrt(fpc)
}

/// Hoeffding-Serfling radius `C sqrt((2/m)(1 - (m-1)/N) log(2/δ))`.
pub fn hoeffding_radius(c: f64, m: usize, n_total: usize, delta: f64) -> f64 {
    let m_f = m as f64;
    let frac = 1.0 - (m_f - 1.0) / n_total as f64;
    c * libm::sqrt(2.0 / m_f * frac * libm::log(2.0 / delta))
}

/// Empirical Bernstein radius `s sqrt(2 log(3/δ)/m) + 6 C log(3/δ)/m`.
pub fn bernstein_radius(s: f64, c: f64, m: usize, delta: f64) -> f64 {
    let l = libm::log(3.0 / delta);
    let m = m as f64;
    s * libm::sqrt(2.0 * l / m) + 6.0 * c * l / m
}

/// Error budget `δ = (p-1)/(p x^p) ε` with `x` the batch count or data count.
fn delta(cfg: &StopRuleConfig, m: usize, batches: usize) -> f64 {
    let x = if cfg.per_batch_delta { batches } else { m } as f64;
    (cfg.p - 1.0) / (cfg.p * libm::pow(x, cfg.p)) * cfg.epsilon
}

fn concentration_radius(acc: &LlrAccumulator, cfg: &StopRuleConfig, c: f64, batches: usize) -> Result<f64> {
    let m = acc.m();
    let d = delta(cfg, m, batches);
    match cfg.rule {
        StopRule::Hoeffding => Ok(hoeffding_radius(c, m, acc.n_total(), d)),
        StopRule::Bernstein => {
            if m < 2 {
                return Err(arg("the Bernstein rule needs at least two ratios"));
            }
            Ok(bernstein_radius(acc.std_dev(), c, m, d))
        }
        StopRule::TTest => Err(arg("not a concentration rule")),
    }
}

/// Concentration rule: returns `(stop, c_m)`; stops when `|Λ̂ - ψ| > c_m`.
pub fn concentration_should_stop(
    acc: &LlrAccumulator,
    psi: f64,
    n_total: usize,
    cfg: &StopRuleConfig,
    c: f64,
    batches: usize,
) -> Result<(bool, f64)> {
    if c <= 0.0 {
        return Err(arg("C bound must be positive"));
    }
    if acc.m() == 0 {
        return Err(arg("no ratios seen"));
    }
    let radius = concentration_radius(acc, cfg, c, batches)?;
    Ok(((acc.mean() - psi).abs() > radius || acc.m() >= n_total, radius))
}

/// Result of one approximate MH step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveOutcome {
    pub accepted: bool,
    /// Number of distinct likelihood ratios evaluated.
    pub data_used: usize,
    pub lambda_hat: f64,
    pub psi: f64,
    pub batches: usize,
    pub proposal: Vec<f64>,
    pub u: f64,
}

/// Lazily shuffled index sequence (incremental Fisher-Yates).
struct LazyPermutation {
    idx: Vec<usize>,
    next: usize,
}

impl LazyPermutation {
    fn new(n: usize) -> Self {
        Self { idx: (0..n).collect(), next: 0 }
    }

    fn take(&mut self, count: usize, rng: &mut dyn RngCore) -> &[usize] {
        let start = self.next;
        let end = (start + count).min(self.idx.len());
        for i in start..end {
            let j = rng.random_range(i..self.idx.len());
            self.idx.swap(i, j);
        }
        self.next = end;
        &self.idx[start..end]
    }
}

/// One approximate MH step: draw `θ'` then `u`, then grow a random subsample
/// in batches of `b, bγ, bγ², ...` until the rule stops; accept iff `Λ̂ > ψ`.
pub fn adaptive_mh_step<T, P>(
    target: &T,
    proposal: &P,
    state: &mut ChainState,
    cfg: &StopRuleConfig,
    rng: &mut dyn RngCore,
) -> Result<AdaptiveOutcome>
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    let n = target.n_data();
    if n == 0 {
        return Err(arg("subsampling needs data"));
    }
    let prop = proposal.sample(&state.theta, rng);
    let mut u: f64 = rng.random();
    if u == 0.0 {
        u = f64::MIN_POSITIVE;
    }
    let psi = mh_log_threshold(u, &state.theta, &prop, proposal, target)?;
    let theta = state.theta.clone();

    let mut perm = LazyPermutation::new(n);
    let mut acc = LlrAccumulator::new(n);
    let mut cached: Vec<f64> = Vec::new();
    let c = match (&cfg.c_bound, cfg.rule) {
        (_, StopRule::TTest) => 0.0,
        (CBound::Fixed(c), _) => *c,
        (CBound::Lipschitz(l), _) => {
            l * libm::sqrt(theta.iter().zip(&prop).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        }
        (CBound::Custom(f), _) => f(&theta, &prop),
        (CBound::Pilot { size, factor }, _) => {
            let pilot = perm.take(*size, rng).to_vec();
            cached = pilot.iter().map(|&i| log_lik_ratio(target, i, &theta, &prop)).collect();
            perm.next = 0;
            factor * cached.iter().fold(0.0f64, |a, v| a.max(v.abs()))
        }
    };
    // A zero range (θ' = θ) makes every ratio zero; any positive C is valid.
    let c = c.max(f64::MIN_POSITIVE);

    let mut batch = cfg.batch as f64;
    let mut batches = 0;
    loop {
        let take = (libm::ceil(batch) as usize).max(1);
        let start = perm.next;
        let idx = perm.take(take, rng).to_vec();
        for (k, &i) in idx.iter().enumerate() {
            let pos = start + k;
            let v = if pos < cached.len() { cached[pos] } else { log_lik_ratio(target, i, &theta, &prop) };
            acc.push(i, v)?;
        }
        batches += 1;
        let stop = if acc.m() >= n {
            true
        } else {
            match cfg.rule {
                StopRule::TTest => ttest_should_stop(&acc, psi, n, cfg.epsilon)?.0,
                _ => concentration_should_stop(&acc, psi, n, cfg, c, batches)?.0,
            }
        };
        if stop {
            break;
        }
        batch *= cfg.gamma;
    }
    let lambda_hat = acc.mean();
    let accepted = lambda_hat > psi;
    if accepted {
        state.theta.clone_from(&prop);
        state.log_joint = f64::NAN;
    }
    state.iter += 1;
    state.rng_cursor += 1;
    Ok(AdaptiveOutcome {
        accepted,
        data_used: acc.m().max(cached.len()),
        lambda_hat,
        psi,
        batches,
        proposal: prop,
        u,
    })
}

/// The exact decision `Λ > ψ` using all data.
pub fn exact_decision<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64], prop: &[f64], psi: f64) -> bool {
    let n = target.n_data();
    let mut sum = 0.0;
    for i in 0..n {
        sum += log_lik_ratio(target, i, theta, prop);
    }
    sum / n as f64 > psi
}

/// A run of the approximate sampler, optionally audited against the exact
/// test at every step.
#[derive(Clone, Debug)]
pub struct AdaptiveRun {
    pub draws: SampleBuffer,
    pub data_used: Vec<usize>,
    /// Steps where the approximate and exact decisions differ (zero when
    /// auditing is off).
    pub disagreements: usize,
    pub state: ChainState,
}

impl AdaptiveRun {
    pub fn mean_data_used(&self) -> f64 {
        self.data_used.iter().sum::<usize>() as f64 / self.data_used.len().max(1) as f64
    }
}

/// Run `iterations` approximate MH steps with keyed streams `(chain, step)`.
pub fn run_adaptive_mh<T, P>(
    target: &T,
    proposal: &P,
    init: Vec<f64>,
    iterations: usize,
    cfg: &StopRuleConfig,
    streams: &Streams,
    chain: u64,
    audit: bool,
) -> Result<AdaptiveRun>
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    cfg.validate()?;
    let mut state = ChainState::with_log_joint(init, f64::NAN);
    let mut draws = SampleBuffer::with_capacity(target.dim(), iterations);
    let mut data_used = Vec::with_capacity(iterations);
    let mut disagreements = 0;
    for _ in 0..iterations {
        let theta = state.theta.clone();
        let mut rng = streams.stream(&[chain, state.rng_cursor]);
        let out = adaptive_mh_step(target, proposal, &mut state, cfg, &mut rng)?;
        if audit && exact_decision(target, &theta, &out.proposal, out.psi) != out.accepted {
            disagreements += 1;
        }
        draws.push(&state.theta, out.accepted);
        data_used.push(out.data_used);
    }
    Ok(AdaptiveRun { draws, data_used, disagreements, state })
}

/// Quantile of Student's t with `dof` degrees of freedom at upper tail `tail`.
fn t_upper_quantile(tail: f64, dof: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_upper_tail(hi, dof) > tail {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_upper_tail(mid, dof) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Largest `N` accepted by [`exact_acceptance_probability`].
pub const MAX_ENUMERATED_DATA: usize = 9;

/// Acceptance probability of the approximate test for the move `θ → θ'`,
/// computed exactly: all `N!` data orders are enumerated and the uniform
/// `u` is integrated analytically. `log_q_ratio` is
/// `log q(θ|θ') - log q(θ'|θ)`. Data-dependent pilot bounds are not supported.
pub fn exact_acceptance_probability<T: FactoredTarget + ?Sized>(
    target: &T,
    theta: &[f64],
    prop: &[f64],
    log_q_ratio: f64,
    cfg: &StopRuleConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = target.n_data();
    if n == 0 || n > MAX_ENUMERATED_DATA {
        return Err(Error::Capacity { size: n, capacity: MAX_ENUMERATED_DATA });
    }
    let c = match (&cfg.c_bound, cfg.rule) {
        (_, StopRule::TTest) => 0.0,
        (CBound::Fixed(c), _) => *c,
        (CBound::Lipschitz(l), _) => {
            l * libm::sqrt(theta.iter().zip(prop).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        }
        (CBound::Custom(f), _) => f(theta, prop),
        (CBound::Pilot { .. }, _) => {
            return Err(Error::Unsupported("pilot bound in exact enumeration".into()))
        }
    };
    let ell: Vec<f64> = (0..n).map(|i| log_lik_ratio(target, i, theta, prop)).collect();
    // ψ = (log u + a) / N
    let a = target.log_prior(theta) - target.log_prior(prop) - log_q_ratio;
    let nf = n as f64;

    // Batch boundaries are fixed by the configuration.
    let mut bounds = Vec::new();
    let mut m = 0usize;
    let mut batch = cfg.batch as f64;
    while m < n {
        m = (m + (libm::ceil(batch) as usize).max(1)).min(n);
        bounds.push(m);
        batch *= cfg.gamma;
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut visit = |perm: &[usize]| -> Result<()> {
        // Per batch: (Λ̂_k, stop radius r_k); stopping happens iff |Λ̂_k - ψ| > r_k.
        let mut levels: Vec<(f64, f64)> = Vec::with_capacity(bounds.len());
        let mut acc = LlrAccumulator::new(n);
        let mut seen = 0;
        for (k, &b) in bounds.iter().enumerate() {
            for &i in &perm[seen..b] {
                acc.push(i, ell[i])?;
            }
            seen = b;
            let r = if b >= n {
                -1.0
            } else {
                match cfg.rule {
                    StopRule::TTest => {
                        let sigma = ttest_sigma(&acc, n);
                        if sigma == 0.0 { 0.0 } else { sigma * t_upper_quantile(cfg.epsilon, (b - 1) as f64) }
                    }
                    _ => concentration_radius(&acc, cfg, c, k + 1)?,
                }
            };
            levels.push((acc.mean(), r));
        }
        let decide = |psi: f64| -> bool {
            for &(lam, r) in &levels {
                if (lam - psi).abs() > r {
                    return lam > psi;
                }
            }
            unreachable!("the final batch always stops")
        };
        let mut cuts: Vec<f64> = Vec::new();
        for &(lam, r) in &levels {
            cuts.push(lam);
            if r > 0.0 {
                cuts.push(lam - r);
                cuts.push(lam + r);
            }
        }
        // Map ψ-breakpoints to u ∈ (0, 1) and integrate piecewise.
        let mut us: Vec<f64> = cuts.iter().map(|p| libm::exp(nf * p - a).min(1.0)).collect();
        us.push(0.0);
        us.push(1.0);
        us.sort_by(|x, y| x.partial_cmp(y).unwrap());
        us.dedup();
        let mut p_acc = 0.0;
        for w in us.windows(2) {
            let (u0, u1) = (w[0], w[1]);
            if u1 <= u0 {
                continue;
            }
            let mid = 0.5 * (u0 + u1);
            let psi = (libm::log(mid) + a) / nf;
            if decide(psi) {
                p_acc += u1 - u0;
            }
        }
        total += p_acc;
        count += 1;
        Ok(())
    };
    // Heap's algorithm.
    let mut stack = vec![0usize; n];
    visit(&perm)?;
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            visit(&perm)?;
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{GaussianIndependence, RandomWalk};
    use crate::model::FnTarget;
    use crate::zoo::GaussianMeanModel;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn flat(n: usize) -> impl FactoredTarget {
        FnTarget::new(1, n, |_: &[f64]| 0.0, |i, x: &[f64]| -0.5 * (x[0] - i as f64 * 0.1).powi(2))
    }

    #[test]
    fn threshold_examples() {
        let t = flat(10);
        let q = RandomWalk::isotropic(1, 1.0);
        let below_one = 1.0 - f64::EPSILON / 2.0;
        assert!(mh_log_threshold(below_one, &[0.0], &[1.0], &q, &t).unwrap().abs() < 1e-16);
        let psi = mh_log_threshold((-10.0f64).exp(), &[0.0], &[1.0], &q, &t).unwrap();
        assert!((psi + 1.0).abs() < 1e-14);
        assert!(mh_log_threshold(0.0, &[0.0], &[1.0], &q, &t).is_err());
        assert!(mh_log_threshold(1.0, &[0.0], &[1.0], &q, &t).is_err());
    }

    #[test]
    fn threshold_sign_matches_full_mh_with_asymmetric_proposal() {
        let t = FnTarget::new(1, 5, |x: &[f64]| -0.5 * x[0] * x[0] / 4.0, |i, x: &[f64]| -0.5 * (x[0] - i as f64).powi(2));
        let q = GaussianIndependence::new(vec![1.0], vec![2.0]);
        let streams = Streams::new(12);
        for k in 0..1000u64 {
            let mut rng = streams.stream(&[k]);
            let theta = [rng.random::<f64>() * 6.0 - 3.0];
            let prop = q.sample(&theta, &mut rng);
            let u: f64 = rng.random::<f64>().max(1e-300);
            let psi = mh_log_threshold(u, &theta, &prop, &q, &t).unwrap();
            let lj = |x: &[f64]| crate::model::log_joint(&t, x).unwrap();
            let log_alpha = lj(&prop) - lj(&theta) + q.log_density(&theta, &prop) - q.log_density(&prop, &theta);
            assert_eq!(exact_decision(&t, &theta, &prop, psi), u.ln() < log_alpha);
        }
    }

    #[test]
    fn accumulator_examples() {
        let mut acc = LlrAccumulator::new(8);
        for i in 0..5 {
            acc.push(i, 0.25).unwrap();
        }
        assert_eq!(acc.mean(), 0.25);
        assert_eq!(acc.mean_sq(), 0.0625);
        assert!(matches!(acc.push(3, 0.1), Err(Error::Logic(_))));
        let t = flat(4);
        let mut a = LlrAccumulator::new(4);
        llr_update(&mut a, &t, &[0.3], &[0.9], &[2, 0]).unwrap();
        llr_update(&mut a, &t, &[0.3], &[0.9], &[3, 1]).unwrap();
        let mut b = LlrAccumulator::new(4);
        llr_update(&mut b, &t, &[0.3], &[0.9], &[2, 0, 3, 1]).unwrap();
        assert!((a.mean() - b.mean()).abs() < 1e-12);
        let mut full = LlrAccumulator::new(4);
        llr_update(&mut full, &t, &[0.3], &[0.9], &[0, 1, 2, 3]).unwrap();
        let direct = (0..4).map(|i| log_lik_ratio(&t, i, &[0.3], &[0.9])).sum::<f64>() / 4.0;
        assert_eq!(full.mean(), direct);
    }

    #[test]
    fn ttest_examples() {
        // Zero variance with Λ̂ ≠ ψ stops immediately.
        let acc = LlrAccumulator::from_moments(10, 0.2, 0.04, 1000);
        assert_eq!(ttest_should_stop(&acc, 0.1, 1000, 0.01).unwrap(), (true, 0.0));
        let acc = LlrAccumulator::from_moments(10, 0.2, 0.04, 1000);
        assert_eq!(ttest_should_stop(&acc, 0.2, 1000, 0.01).unwrap(), (false, 0.5));
        let acc = LlrAccumulator::from_moments(50, 0.0, 1.0, 50);
        assert!(ttest_should_stop(&acc, 0.0, 50, 0.01).unwrap().0);
        assert!(ttest_should_stop(&LlrAccumulator::from_moments(1, 0.0, 0.0, 5), 0.0, 5, 0.1).is_err());

        // m=100, N=10⁴, Λ̂=0.5, ψ=0.3, s=1.
        let mean_sq = 0.25 + 99.0 / 100.0;
        let acc = LlrAccumulator::from_moments(100, 0.5, mean_sq, 10_000);
        let sigma = ttest_sigma(&acc, 10_000);
        assert!((sigma - 0.099_504).abs() < 1e-6);
        let (_, rho) = ttest_should_stop(&acc, 0.3, 10_000, 0.01).unwrap();
        let t = 0.2 / sigma;
        assert!((t - 2.0100).abs() < 1e-4);
        let oracle = 1.0 - StudentsT::new(0.0, 1.0, 99.0).unwrap().cdf(t);
        assert!((rho - oracle).abs() < 1e-10);
        assert!((rho - 0.0236).abs() < 1e-4);
    }

    #[test]
    fn concentration_examples() {
        // Direct evaluation of the Hoeffding-Serfling radius.
        let c = hoeffding_radius(1.0, 100, 10_000, 0.01);
        let want = (2.0 / 100.0 * (1.0 - 99.0 / 10_000.0) * (200.0f64).ln()).sqrt();
        assert!((c - want).abs() < 1e-15);
        assert!((c - 0.32391).abs() < 1e-5);
        let cfg = StopRuleConfig { rule: StopRule::Hoeffding, c_bound: CBound::Fixed(1.0), ..Default::default() };
        let acc = LlrAccumulator::from_moments(10, 0.0, 0.0, 10);
        assert!(concentration_should_stop(&acc, 0.0, 10, &cfg, 1.0, 1).unwrap().0);
        assert!(concentration_should_stop(&acc, 0.0, 10, &cfg, 0.0, 1).is_err());
        // Monotone decrease in m at fixed δ.
        let radii: Vec<f64> = (1..500).map(|m| hoeffding_radius(1.0, m, 500, 0.01)).collect();
        assert!(radii.windows(2).all(|w| w[1] < w[0]));
        // With s = 0 the Bernstein radius is 6C log(3/δ)/m and undercuts
        // Hoeffding beyond a crossover point.
        let n = 1_000_000;
        let cross = (2..n).find(|&m| bernstein_radius(0.0, 1.0, m, 0.01) < hoeffding_radius(1.0, m, n, 0.01)).unwrap();
        assert!((bernstein_radius(0.0, 1.0, 100, 0.01) - 6.0 * 300f64.ln() / 100.0).abs() < 1e-15);
        for m in [cross, cross * 2, cross * 10] {
            assert!(bernstein_radius(0.0, 1.0, m, 0.01) < hoeffding_radius(1.0, m, n, 0.01));
        }
    }

    #[test]
    fn tiny_epsilon_recovers_exact_test() {
        let model = GaussianMeanModel::generate(&[0.5], 1.0, 1.0, 300, &Streams::new(1));
        let cfg = StopRuleConfig { batch: 10, epsilon: 1e-300, ..Default::default() };
        let q = RandomWalk::isotropic(1, 0.1);
        let run = run_adaptive_mh(&model, &q, vec![0.5], 300, &cfg, &Streams::new(2), 0, true).unwrap();
        assert_eq!(run.disagreements, 0);
        assert!(run.data_used.iter().all(|m| *m == 300));
    }

    #[test]
    fn hoeffding_disagreement_on_gaussian_target() {
        let n = 10_000;
        let model = GaussianMeanModel::generate(&[1.0], 10.0, 1.0, n, &Streams::new(3));
        let max_abs = model.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        // |ℓ_n| ≤ |θ' - θ| (max|x| + (|θ| + |θ'|)/2) for unit noise.
        let bound = Arc::new(move |a: &[f64], b: &[f64]| (b[0] - a[0]).abs() * (max_abs + 0.5 * (a[0].abs() + b[0].abs())));
        let cfg = StopRuleConfig {
            batch: 100,
            rule: StopRule::Hoeffding,
            c_bound: CBound::Custom(bound),
            ..Default::default()
        };
        let (mean, var) = model.posterior();
        let q = RandomWalk::isotropic(1, 2.4 * var.sqrt());
        let run = run_adaptive_mh(&model, &q, mean, 10_000, &cfg, &Streams::new(4), 0, true).unwrap();
        assert!((run.disagreements as f64) / 10_000.0 <= 0.01, "{}", run.disagreements);
    }

    #[test]
    fn tail_proposals_use_less_data_than_mode_proposals() {
        let n = 5_000;
        let model = GaussianMeanModel::generate(&[0.0], 10.0, 1.0, n, &Streams::new(5));
        let (mean, var) = model.posterior();
        let sd = var.sqrt();
        let cfg = StopRuleConfig { batch: 50, ..Default::default() };
        let streams = Streams::new(6);
        let mut tail = Vec::new();
        let mut mode = Vec::new();
        for k in 0..400u64 {
            // Start at the mode; propose either a small move or a far jump.
            let mut s = ChainState::with_log_joint(mean.clone(), f64::NAN);
            let q_near = RandomWalk::isotropic(1, sd);
            let q_far = RandomWalk::isotropic(1, 100.0 * sd);
            let mut rng = streams.stream(&[k, 0]);
            mode.push(adaptive_mh_step(&model, &q_near, &mut s, &cfg, &mut rng).unwrap().data_used);
            let mut s = ChainState::with_log_joint(mean.clone(), f64::NAN);
            let mut rng = streams.stream(&[k, 1]);
            tail.push(adaptive_mh_step(&model, &q_far, &mut s, &cfg, &mut rng).unwrap().data_used);
        }
        tail.sort_unstable();
        mode.sort_unstable();
        assert!(tail[200] < mode[200], "tail {} mode {}", tail[200], mode[200]);
    }

    #[test]
    fn pilot_bound_runs_and_counts_pilot_data() {
        let model = GaussianMeanModel::generate(&[0.0], 10.0, 1.0, 3000, &Streams::new(7));
        let cfg = StopRuleConfig { rule: StopRule::Bernstein, c_bound: CBound::pilot(), ..Default::default() };
        let q = RandomWalk::isotropic(1, 0.05);
        let run = run_adaptive_mh(&model, &q, vec![0.0], 50, &cfg, &Streams::new(8), 0, false).unwrap();
        assert!(run.data_used.iter().all(|m| *m >= 1000));
    }

    #[test]
    fn config_validation() {
        assert!(StopRuleConfig::default().validate().is_ok());
        assert!(StopRuleConfig { epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(StopRuleConfig { batch: 1, ..Default::default() }.validate().is_err());
        assert!(StopRuleConfig { p: 1.0, ..Default::default() }.validate().is_err());
        assert!(StopRuleConfig { gamma: 0.5, ..Default::default() }.validate().is_err());
        assert!(StopRuleConfig { c_bound: CBound::Fixed(0.0), rule: StopRule::Hoeffding, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn enumerated_acceptance_matches_simulation() {
        let t = FnTarget::new(1, 6, |x: &[f64]| -0.5 * x[0] * x[0], |i, x: &[f64]| -0.5 * (x[0] - [0.2, 1.5, -0.7, 0.9, 2.4, -1.1][i]).powi(2));
        let cfg = StopRuleConfig { batch: 2, epsilon: 0.2, ..Default::default() };
        let theta = [0.1];
        let prop = [0.6];
        let p = exact_acceptance_probability(&t, &theta, &prop, 0.0, &cfg).unwrap();
        // Monte Carlo over permutations and u.
        let fixed = FixedProposal(prop.to_vec());
        let streams = Streams::new(40);
        let trials = 200_000;
        let mut hits = 0;
        for k in 0..trials {
            let mut s = ChainState::with_log_joint(theta.to_vec(), f64::NAN);
            if adaptive_mh_step(&t, &fixed, &mut s, &cfg, &mut streams.stream(&[k])).unwrap().accepted {
                hits += 1;
            }
        }
        let est = hits as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((est - p).abs() < 4.0 * se, "{est} vs {p}");
        // Exhaustive ε recovers the exact MH acceptance probability.
        let tight = StopRuleConfig { batch: 2, epsilon: 1e-300, ..Default::default() };
        let exact = exact_acceptance_probability(&t, &theta, &prop, 0.0, &tight).unwrap();
        let lj = |x: &[f64]| crate::model::log_joint(&t, x).unwrap();
        assert!((exact - (lj(&prop) - lj(&theta)).exp().min(1.0)).abs() < 1e-12);
    }

    struct FixedProposal(Vec<f64>);
    impl Proposal for FixedProposal {
        fn sample(&self, _: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
            self.0.clone()
        }
        fn log_density(&self, _: &[f64], _: &[f64]) -> f64 {
            0.0
        }
        fn is_symmetric(&self) -> bool {
            true
        }
    }
}
