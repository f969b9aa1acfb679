//! Probabilistic model abstractions.

mod conjugate;
mod expfam;
mod gaussian;
mod target;

pub use conjugate::{
    conjugate_posterior_update, BetaBernoulli, ConjugatePair, DirichletCategorical, GammaPoisson,
    MvNormalMean, NormalMean,
};
pub use expfam::{
    expfam_mean, expfam_score_fisher, log_density, BernoulliConjugatePrior, Bernoulli, Categorical, Dirichlet,
    ExpFamily, Gaussian, MvNormalInfo, NormalMeanPrior, Poisson, PoissonConjugatePrior,
};
pub use gaussian::{GaussianModelSpec, GaussianShardTarget};
pub use target::{
    central_difference, grad_log_joint, log_joint, log_likelihood, max_gradient_error, FactoredTarget,
    FnTarget,
};
