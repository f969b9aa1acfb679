//! Scalable Bayesian inference on a desk-scale budget.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithm together
//! with the deterministic discrete-event cluster simulator they run on:
//!
//! * [`model`]: factored targets, exponential families, conjugate pairs and
//!   the analytic Gaussian model used as an oracle.
//! * [`mcmc`]: serial Metropolis-Hastings and Gibbs kernels, estimators,
//!   adaptive proposals, detailed-balance checks.
//! * [`subsample`], [`firefly`], [`sgld`]: data-subsampling samplers.
//! * [`sim`], [`prefetch`], [`consensus`], [`weierstrass`], [`hogwild`]:
//!   parallel and distributed MCMC on the simulated cluster.
//! * [`vi`] and [`vi_scalable`]: mean-field variational inference, SVI,
//!   black-box and reparameterization gradients, streaming updates.
//! * [`diagnostics`]: R-hat, effective sample size, asymptotic variance and
//!   the bias/variance error-decomposition experiment.
#![no_std]
#![cfg_attr(test, allow(unused_imports))]
// Index loops mirror the matrix algebra; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod consensus;
pub mod diagnostics;
mod error;
pub mod firefly;
pub mod hogwild;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod prefetch;
pub mod rng;
pub mod sgld;
pub mod sim;
pub mod special;
pub mod subsample;
pub mod vi;
pub mod vi_scalable;
pub mod weierstrass;
pub mod zoo;

pub(crate) use error::arg;
pub use error::{Error, Result};
