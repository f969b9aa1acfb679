//! Firefly Monte Carlo: exact posterior sampling that evaluates likelihoods
//! only for "bright" data.
//!
//! Each datum carries an indicator `z_n`. Given `θ`, a datum is bright with
//! probability `(L_n - B_n)/L_n` for a lower bound `0 < B_n ≤ L_n`. Dark data
//! contribute `B_n`, whose product over the dark set collapses to a function
//! of summed per-datum statistics, so a step costs O(bright) likelihood
//! evaluations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::mcmc::{ChainState, Proposal, SampleBuffer};
use crate::model::FactoredTarget;
use crate::rng::{tag, Streams};
use crate::special::{ln_1m_exp, ln_sigmoid};
use crate::zoo::{GaussianMeanModel, LogisticRegression};
use crate::{arg, Error, Result};

/// Tolerance on `log B - log L` before a bound counts as violated.
pub const BOUND_SLACK: f64 = 1e-9;

/// A per-datum likelihood lower bound whose product over any set of data is
/// a function of the summed statistics of that set.
pub trait LikelihoodBound {
    /// Length of the per-datum statistic vector.
    fn stat_dim(&self) -> usize;
    /// `log B_n(θ)`.
    fn log_bound(&self, n: usize, theta: &[f64]) -> f64;
    /// Write the statistics of datum `n` into `out`.
    fn dark_stats_of(&self, n: usize, out: &mut [f64]);
    /// `Σ_{n∈S} log B_n(θ)` from the summed statistics of `S`.
    fn collapsed_log_product(&self, theta: &[f64], stats: &[f64]) -> f64;
}

/// A likelihood whose log over a set of data depends only on summed
/// statistics. The first statistic must be the count (`1` per datum).
pub trait CollapsibleLikelihood: FactoredTarget {
    fn stat_dim(&self) -> usize;
    fn datum_stats_into(&self, n: usize, out: &mut [f64]);
    fn log_lik_from_stats(&self, theta: &[f64], stats: &[f64]) -> f64;
}

impl CollapsibleLikelihood for GaussianMeanModel {
    fn stat_dim(&self) -> usize {
        self.dim() + 2
    }
    fn datum_stats_into(&self, n: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.datum_stats(n));
    }
    fn log_lik_from_stats(&self, theta: &[f64], stats: &[f64]) -> f64 {
        GaussianMeanModel::log_lik_from_stats(self, theta, stats)
    }
}

impl<M: CollapsibleLikelihood + ?Sized> CollapsibleLikelihood for &M {
    fn stat_dim(&self) -> usize {
        (**self).stat_dim()
    }
    fn datum_stats_into(&self, n: usize, out: &mut [f64]) {
        (**self).datum_stats_into(n, out)
    }
    fn log_lik_from_stats(&self, theta: &[f64], stats: &[f64]) -> f64 {
        (**self).log_lik_from_stats(theta, stats)
    }
}

/// `B_n = e^{-δ} L_n`: a uniformly loose bound, mainly a testing device.
#[derive(Clone, Debug)]
pub struct ScaledBound<M> {
    model: M,
    delta: f64,
}

impl<M: CollapsibleLikelihood> ScaledBound<M> {
    pub fn new(model: M, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(arg("delta must be finite and non-negative"));
        }
        Ok(Self { model, delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl<M: CollapsibleLikelihood> LikelihoodBound for ScaledBound<M> {
    fn stat_dim(&self) -> usize {
        self.model.stat_dim()
    }
    fn log_bound(&self, n: usize, theta: &[f64]) -> f64 {
        self.model.log_lik_term(n, theta) - self.delta
    }
    fn dark_stats_of(&self, n: usize, out: &mut [f64]) {
        self.model.datum_stats_into(n, out)
    }
    fn collapsed_log_product(&self, theta: &[f64], stats: &[f64]) -> f64 {
        self.model.log_lik_from_stats(theta, stats) - self.delta * stats[0]
    }
}

/// `λ(ξ) = tanh(ξ/2) / (4ξ)`, with the limit `1/8` at zero.
fn jj_lambda(xi: f64) -> f64 {
    if xi.abs() < 1e-6 {
        0.125 - xi * xi / 96.0
    } else {
        libm::tanh(xi / 2.0) / (4.0 * xi)
    }
}

/// Quadratic lower bound on the logistic log-likelihood,
/// `log σ(s) ≥ log σ(ξ) + (s - ξ)/2 - λ(ξ)(s² - ξ²)`, tight at `s = ±ξ`.
///
/// Tangency points are the margins at a reference `θ` (typically the MAP).
/// Statistics per datum are `(a_n, y_n x_n / 2, λ_n x_n x_nᵀ)`.
#[derive(Clone, Debug)]
pub struct LogisticBound {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    offset: Vec<f64>,
    lambda: Vec<f64>,
}

impl LogisticBound {
    pub fn new(model: &LogisticRegression, reference: &[f64]) -> Result<Self> {
        let d = model.dim();
        if reference.len() != d {
            return Err(arg("reference point has the wrong dimension"));
        }
        let n = model.n_data();
        let mut offset = Vec::with_capacity(n);
        let mut lambda = Vec::with_capacity(n);
        for i in 0..n {
            let xi = model.margin(i, reference).abs();
            let lam = jj_lambda(xi);
            offset.push(ln_sigmoid(xi) - xi / 2.0 + lam * xi * xi);
            lambda.push(lam);
        }
        Ok(Self { dim: d, features: model.features().to_vec(), labels: model.labels().to_vec(), offset, lambda })
    }

    fn feature(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }
}

impl LikelihoodBound for LogisticBound {
    fn stat_dim(&self) -> usize {
        1 + self.dim + self.dim * self.dim
    }
    fn log_bound(&self, n: usize, theta: &[f64]) -> f64 {
        let r: f64 = self.feature(n).iter().zip(theta).map(|(x, t)| x * t).sum();
        self.offset[n] + 0.5 * self.labels[n] * r - self.lambda[n] * r * r
    }
    fn dark_stats_of(&self, n: usize, out: &mut [f64]) {
        let d = self.dim;
        let x = self.feature(n);
        out[0] = self.offset[n];
        for i in 0..d {
            out[1 + i] = 0.5 * self.labels[n] * x[i];
            for j in 0..d {
                out[1 + d + i * d + j] = self.lambda[n] * x[i] * x[j];
            }
        }
    }
    fn collapsed_log_product(&self, theta: &[f64], stats: &[f64]) -> f64 {
        let d = self.dim;
        let mut v = stats[0];
        for i in 0..d {
            v += theta[i] * stats[1 + i];
            for j in 0..d {
                v -= theta[i] * stats[1 + d + i * d + j] * theta[j];
            }
        }
        v
    }
}

/// `log L_n`, `log B_n` and the bright term `log(L_n - B_n)` at `θ`.
fn bright_parts<T, B>(n: usize, theta: &[f64], target: &T, bound: &B) -> Result<(f64, f64)>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
{
    let log_l = target.log_lik_term(n, theta);
    let log_b = bound.log_bound(n, theta);
    let gap = log_b - log_l;
    if gap > BOUND_SLACK {
        return Err(Error::BoundViolation { index: n, excess: gap });
    }
    if gap.is_nan() {
        return Err(Error::Evaluation(format!("likelihood or bound of datum {n} is NaN")));
    }
    let gap = gap.min(0.0);
    let prob = (-libm::expm1(gap)).clamp(0.0, 1.0);
    Ok((prob, log_l + ln_1m_exp(gap)))
}

/// Probability that datum `n` is bright given `θ`: `1 - B_n/L_n`.
pub fn brightness_prob<T, B>(n: usize, theta: &[f64], target: &T, bound: &B) -> Result<f64>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
{
    bright_parts(n, theta, target, bound).map(|(p, _)| p)
}

/// Sampler state: `θ`, the indicators, and caches that keep a step at
/// O(bright) likelihood evaluations.
#[derive(Clone, Debug)]
pub struct FireflyState {
    pub theta: Vec<f64>,
    z: Vec<bool>,
    bright: Vec<usize>,
    /// Position of each bright datum in `bright` (`usize::MAX` when dark).
    slot: Vec<usize>,
    /// `log(L_n - B_n)` at `theta`, parallel to `bright`.
    bright_terms: Vec<f64>,
    dark_stat_sum: Vec<f64>,
    /// Cached augmented log joint at `theta`.
    pub log_joint: f64,
    pub iter: u64,
    pub rng_cursor: u64,
    /// Total likelihood-term evaluations so far.
    pub lik_evals: u64,
}

impl FireflyState {
    /// All data dark; costs no likelihood evaluations.
    pub fn all_dark<T, B>(target: &T, bound: &B, theta: Vec<f64>) -> Result<Self>
    where
        T: FactoredTarget + ?Sized,
        B: LikelihoodBound + ?Sized,
    {
        if theta.len() != target.dim() {
            return Err(arg("initial state has the wrong dimension"));
        }
        let n = target.n_data();
        let dark_stat_sum = full_dark_sum(bound, &vec![false; n]);
        let mut s = Self {
            theta,
            z: vec![false; n],
            bright: Vec::new(),
            slot: vec![usize::MAX; n],
            bright_terms: Vec::new(),
            dark_stat_sum,
            log_joint: 0.0,
            iter: 0,
            rng_cursor: 0,
            lik_evals: 0,
        };
        s.refresh_log_joint(target, bound);
        Ok(s)
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn bright_count(&self) -> usize {
        self.bright.len()
    }

    pub fn bright_indices(&self) -> &[usize] {
        &self.bright
    }

    pub fn dark_stat_sum(&self) -> &[f64] {
        &self.dark_stat_sum
    }

    /// Force datum `n` bright or dark (for tests and custom schedules).
    pub fn set_indicator<T, B>(&mut self, n: usize, bright: bool, target: &T, bound: &B) -> Result<()>
    where
        T: FactoredTarget + ?Sized,
        B: LikelihoodBound + ?Sized,
    {
        if n >= self.z.len() {
            return Err(arg("datum index out of range"));
        }
        let term = if bright {
            self.lik_evals += 1;
            let (p, term) = bright_parts(n, &self.theta, target, bound)?;
            if p == 0.0 {
                return Err(arg("datum cannot be bright where its bound is tight"));
            }
            term
        } else {
            0.0
        };
        self.assign(n, bright, term, bound);
        self.refresh_log_joint(target, bound);
        Ok(())
    }

    fn assign<B: LikelihoodBound + ?Sized>(&mut self, n: usize, bright: bool, term: f64, bound: &B) {
        if bright == self.z[n] {
            if bright {
                self.bright_terms[self.slot[n]] = term;
            }
            return;
        }
        let mut stats = vec![0.0; bound.stat_dim()];
        bound.dark_stats_of(n, &mut stats);
        if bright {
            self.slot[n] = self.bright.len();
            self.bright.push(n);
            self.bright_terms.push(term);
            self.dark_stat_sum.iter_mut().zip(&stats).for_each(|(s, v)| *s -= v);
        } else {
            let k = self.slot[n];
            self.bright.swap_remove(k);
            self.bright_terms.swap_remove(k);
            if k < self.bright.len() {
                self.slot[self.bright[k]] = k;
            }
            self.slot[n] = usize::MAX;
            self.dark_stat_sum.iter_mut().zip(&stats).for_each(|(s, v)| *s += v);
        }
        self.z[n] = bright;
    }

    fn refresh_log_joint<T, B>(&mut self, target: &T, bound: &B)
    where
        T: FactoredTarget + ?Sized,
        B: LikelihoodBound + ?Sized,
    {
        self.log_joint = target.log_prior(&self.theta)
            + self.bright_terms.iter().sum::<f64>()
            + bound.collapsed_log_product(&self.theta, &self.dark_stat_sum);
    }

    /// Compare the cached dark statistics with a full recomputation.
    pub fn check_coherence<B: LikelihoodBound + ?Sized>(&self, bound: &B, tol: f64) -> Result<()> {
        let full = full_dark_sum(bound, &self.z);
        for (i, (a, b)) in self.dark_stat_sum.iter().zip(&full).enumerate() {
            if (a - b).abs() > tol * (1.0 + b.abs()) {
                return Err(Error::Logic(format!("dark statistic {i} drifted: cached {a}, recomputed {b}")));
            }
        }
        if self.bright.len() != self.z.iter().filter(|z| **z).count() {
            return Err(Error::Logic("bright set out of sync with indicators".into()));
        }
        Ok(())
    }
}

fn full_dark_sum<B: LikelihoodBound + ?Sized>(bound: &B, z: &[bool]) -> Vec<f64> {
    let mut sum = vec![0.0; bound.stat_dim()];
    let mut stats = vec![0.0; bound.stat_dim()];
    for (n, _) in z.iter().enumerate().filter(|(_, b)| !**b) {
        bound.dark_stats_of(n, &mut stats);
        sum.iter_mut().zip(&stats).for_each(|(s, v)| *s += v);
    }
    sum
}

/// Augmented log joint `log π0(θ) + Σ_bright log(L_n - B_n) + Σ_dark log B_n`,
/// evaluating likelihoods for bright data only.
pub fn flymc_log_joint<T, B>(state: &FireflyState, target: &T, bound: &B) -> Result<f64>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
{
    augmented_at(&state.theta, state, target, bound).map(|(v, _)| v)
}

fn augmented_at<T, B>(theta: &[f64], state: &FireflyState, target: &T, bound: &B) -> Result<(f64, Vec<f64>)>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
{
    let mut terms = Vec::with_capacity(state.bright.len());
    for &n in &state.bright {
        terms.push(bright_parts(n, theta, target, bound)?.1);
    }
    let v = target.log_prior(theta)
        + terms.iter().sum::<f64>()
        + bound.collapsed_log_product(theta, &state.dark_stat_sum);
    Ok((v, terms))
}

/// Redraw a uniformly chosen `⌈ρ_z N⌉` subset of indicators from their
/// conditional given `θ`.
pub fn resample_brightness<T, B>(
    state: &mut FireflyState,
    target: &T,
    bound: &B,
    fraction: f64,
    rng: &mut dyn RngCore,
) -> Result<usize>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(arg("brightness fraction must lie in (0, 1]"));
    }
    let n = state.z.len();
    let k = (libm::ceil(fraction * n as f64) as usize).min(n);
    let chosen = rand::seq::index::sample(rng, n, k);
    for i in chosen.iter() {
        let (p, term) = bright_parts(i, &state.theta, target, bound)?;
        state.lik_evals += 1;
        let bright = rng.random::<f64>() < p;
        state.assign(i, bright, term, bound);
    }
    state.refresh_log_joint(target, bound);
    debug_assert!(state.check_coherence(bound, 1e-6).is_ok());
    Ok(k)
}

/// What happened in one FlyMC step.
#[derive(Clone, Debug, PartialEq)]
pub struct FireflyOutcome {
    pub accepted: bool,
    /// Likelihood evaluations spent by this step.
    pub lik_evals: u64,
    pub bright_count: usize,
}

/// One MH update of `θ` under the augmented joint, then a brightness
/// resample. Draw order: proposal, uniform, then indicators.
pub fn flymc_step<T, B, P>(
    state: &mut FireflyState,
    target: &T,
    bound: &B,
    proposal: &P,
    fraction: f64,
    rng: &mut dyn RngCore,
) -> Result<FireflyOutcome>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
    P: Proposal + ?Sized,
{
    let before = state.lik_evals;
    let prop = proposal.sample(&state.theta, rng);
    let u: f64 = rng.random();
    let (proposed, terms) = augmented_at(&prop, state, target, bound)?;
    state.lik_evals += state.bright.len() as u64;
    let mut log_alpha = proposed - state.log_joint;
    if !proposal.is_symmetric() {
        log_alpha += proposal.log_density(&state.theta, &prop) - proposal.log_density(&prop, &state.theta);
    }
    let accepted = proposed.is_finite() && libm::log(u) < log_alpha;
    if accepted {
        state.theta = prop;
        state.bright_terms = terms;
        state.log_joint = proposed;
    }
    resample_brightness(state, target, bound, fraction, rng)?;
    state.iter += 1;
    state.rng_cursor += 1;
    Ok(FireflyOutcome { accepted, lik_evals: state.lik_evals - before, bright_count: state.bright.len() })
}

/// A FlyMC run.
#[derive(Clone, Debug)]
pub struct FireflyRun {
    pub draws: SampleBuffer,
    pub lik_evals: Vec<u64>,
    pub bright_counts: Vec<usize>,
    pub state: FireflyState,
}

/// Run `iterations` FlyMC steps. Indicators start from a full draw given
/// `init`; step `s` uses the stream keyed by `(chain, s)`.
pub fn run_flymc<T, B, P>(
    target: &T,
    bound: &B,
    proposal: &P,
    init: Vec<f64>,
    iterations: usize,
    fraction: f64,
    streams: &Streams,
    chain: u64,
) -> Result<FireflyRun>
where
    T: FactoredTarget + ?Sized,
    B: LikelihoodBound + ?Sized,
    P: Proposal + ?Sized,
{
    let mut state = FireflyState::all_dark(target, bound, init)?;
    resample_brightness(&mut state, target, bound, 1.0, &mut streams.stream(&[tag::BRIGHTNESS, chain]))?;
    let mut draws = SampleBuffer::with_capacity(target.dim(), iterations);
    let mut lik_evals = Vec::with_capacity(iterations);
    let mut bright_counts = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut rng = streams.stream(&[chain, state.rng_cursor]);
        let out = flymc_step(&mut state, target, bound, proposal, fraction, &mut rng)?;
        draws.push(&state.theta, out.accepted);
        lik_evals.push(out.lik_evals);
        bright_counts.push(out.bright_count);
    }
    Ok(FireflyRun { draws, lik_evals, bright_counts, state })
}

/// Convert to a plain chain state (for handing off to other samplers).
impl From<&FireflyState> for ChainState {
    fn from(s: &FireflyState) -> Self {
        let mut c = ChainState::with_log_joint(s.theta.clone(), f64::NAN);
        c.iter = s.iter;
        c.rng_cursor = s.rng_cursor;
        c
    }
}
