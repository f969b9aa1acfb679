//! Stochastic gradient ascent and stochastic gradient Langevin dynamics.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::mcmc::SampleBuffer;
use crate::model::FactoredTarget;
use crate::rng::{tag, Streams};
use crate::{arg, Error, Result};

/// `ε_t = max(α (β + t)^{-γ}, ε_∞)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub floor: f64,
}

impl StepSchedule {
    /// A pure polynomial schedule; `γ ∈ (0.5, 1]` makes `Σε_t` diverge and
    /// `Σε_t²` converge.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(arg("alpha and beta must be positive"));
        }
        if !(gamma > 0.5 && gamma <= 1.0) {
            return Err(arg("gamma must lie in (0.5, 1]"));
        }
        Ok(Self { alpha, beta, gamma, floor: 0.0 })
    }

    pub fn with_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(arg("step-size floor must be finite and non-negative"));
        }
        self.floor = floor;
        Ok(self)
    }

    pub fn step_size(&self, t: u64) -> f64 {
        (self.alpha * libm::pow(self.beta + t as f64, -self.gamma)).max(self.floor)
    }
}

/// Minibatches as consecutive slices of a fresh permutation each epoch. When
/// `m` does not divide `N` the last batch of an epoch is short.
#[derive(Clone, Debug)]
pub struct MinibatchPlan {
    n: usize,
    batch: usize,
    streams: Streams,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl MinibatchPlan {
    /// Epoch `e` shuffles with the stream keyed by `e` under `streams`.
    pub fn new(n: usize, batch: usize, streams: Streams) -> Result<Self> {
        if n == 0 || batch == 0 || batch > n {
            return Err(arg("need 0 < batch <= N"));
        }
        Ok(Self { n, batch, streams, epoch: None, perm: (0..n).collect() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    /// The minibatch used at step `t`.
    pub fn batch(&mut self, t: u64) -> &[usize] {
        let j = self.batches_per_epoch() as u64;
        let (epoch, k) = (t / j, (t % j) as usize);
        if self.epoch != Some(epoch) {
            self.perm.iter_mut().enumerate().for_each(|(i, p)| *p = i);
            self.perm.shuffle(&mut self.streams.stream(&[epoch]));
            self.epoch = Some(epoch);
        }
        let start = k * self.batch;
        &self.perm[start..(start + self.batch).min(self.n)]
    }
}

/// `∇log π0(θ) + (N/|B|) Σ_{n∈B} ∇log π(x_n | θ)`.
pub fn stochastic_grad<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(arg("empty minibatch"));
    }
    let d = target.dim();
    let mut total = vec![0.0; d];
    target.grad_log_prior(theta, &mut total);
    let mut tmp = vec![0.0; d];
    // A full batch accumulates in the same order as the exact gradient.
    let full = batch.len() == target.n_data();
    let mut lik = vec![0.0; d];
    let acc = if full { &mut total } else { &mut lik };
    for &n in batch {
        target.grad_log_lik_term(n, theta, &mut tmp);
        acc.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    }
    if !full {
        let scale = target.n_data() as f64 / batch.len() as f64;
        total.iter_mut().zip(&lik).for_each(|(a, l)| *a += scale * l);
    }
    if total.iter().all(|g| g.is_finite()) {
        Ok(total)
    } else {
        Err(Error::Evaluation("non-finite stochastic gradient".into()))
    }
}

/// `θ + (ε/2) g`.
pub fn sgd_step(theta: &[f64], grad: &[f64], eps: f64) -> Vec<f64> {
    theta.iter().zip(grad).map(|(t, g)| t + 0.5 * eps * g).collect()
}

/// One SGLD update; returns the step size used. Never applies an MH test.
pub fn sgld_step<T: FactoredTarget + ?Sized>(
    theta: &mut [f64],
    target: &T,
    plan: &mut MinibatchPlan,
    schedule: &StepSchedule,
    t: u64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let eps = schedule.step_size(t);
    let grad = stochastic_grad(target, theta, plan.batch(t))?;
    let sd = libm::sqrt(eps);
    for (x, g) in theta.iter_mut().zip(&grad) {
        let z: f64 = StandardNormal.sample(rng);
        *x += 0.5 * eps * g + sd * z;
    }
    Ok(eps)
}

/// An SGLD trajectory with the step size of every iterate.
#[derive(Clone, Debug)]
pub struct SgldRun {
    pub draws: SampleBuffer,
    pub step_sizes: Vec<f64>,
}

impl SgldRun {
    /// Step-size weighted mean of `f` over the iterates from `from` on.
    pub fn weighted_mean(&self, from: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for t in from..self.draws.len() {
            num += self.step_sizes[t] * f(self.draws.row(t));
            den += self.step_sizes[t];
        }
        num / den
    }
}

/// Run SGLD; the noise of step `t` of chain `chain` comes from the stream
/// keyed by `(chain, t)` and epoch permutations from a separate family.
pub fn run_sgld<T: FactoredTarget + ?Sized>(
    target: &T,
    init: Vec<f64>,
    iterations: usize,
    batch: usize,
    schedule: &StepSchedule,
    streams: &Streams,
    chain: u64,
) -> Result<SgldRun> {
    if init.len() != target.dim() {
        return Err(arg("initial state has the wrong dimension"));
    }
    let mut plan = MinibatchPlan::new(target.n_data(), batch, streams.child(tag::PERMUTATION).child(chain))?;
    let mut theta = init;
    let mut draws = SampleBuffer::with_capacity(target.dim(), iterations);
    let mut step_sizes = Vec::with_capacity(iterations);
    for t in 0..iterations as u64 {
        let eps = sgld_step(&mut theta, target, &mut plan, schedule, t, &mut streams.stream(&[chain, t]))?;
        draws.push(&theta, true);
        step_sizes.push(eps);
    }
    Ok(SgldRun { draws, step_sizes })
}

/// Stochastic gradient ascent towards the posterior mode.
pub fn run_sgd<T: FactoredTarget + ?Sized>(
    target: &T,
    init: Vec<f64>,
    iterations: usize,
    batch: usize,
    schedule: &StepSchedule,
    streams: &Streams,
) -> Result<Vec<f64>> {
    let mut plan = MinibatchPlan::new(target.n_data(), batch, streams.child(tag::PERMUTATION))?;
    let mut theta = init;
    for t in 0..iterations as u64 {
        let g = stochastic_grad(target, &theta, plan.batch(t))?;
        theta = sgd_step(&theta, &g, schedule.step_size(t));
    }
    Ok(theta)
}
