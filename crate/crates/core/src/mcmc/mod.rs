//! Serial Metropolis-Hastings and Gibbs kernels, Monte Carlo estimators,
//! adaptive proposals and detailed-balance utilities.

mod adaptive;
mod balance;
mod chain;
mod estimate;
mod gibbs;
mod parallel;
mod proposal;

pub use adaptive::{adaptive_proposal_update, AdaptiveMetropolis};
pub use balance::{detailed_balance_check, mh_kernel, total_variation, FiniteKernel, MAX_STATES};
pub use chain::{mh_step, run_mh, ChainState, MhOutcome, SampleBuffer};
pub(crate) use chain::acceptance_log_ratio;
pub use estimate::{mc_estimate, Policy};
pub use gibbs::{gibbs_sweep, run_gibbs, Conditional, Scan};
pub use parallel::{parallel_log_lik, tree_log_lik, ShardPlan};
pub use proposal::{GaussianIndependence, Proposal, RandomWalk};
