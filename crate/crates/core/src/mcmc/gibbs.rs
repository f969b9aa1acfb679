use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::rng::Streams;
use crate::{Error, Result};

/// A sampler for one variable given the rest of the state.
pub trait Conditional<T> {
    fn sample(&self, state: &[T], rng: &mut dyn RngCore) -> Result<T>;
}

impl<T, F> Conditional<T> for F
where
    F: Fn(&[T], &mut dyn RngCore) -> Result<T>,
{
    fn sample(&self, state: &[T], rng: &mut dyn RngCore) -> Result<T> {
        self(state, rng)
    }
}

/// Visiting order of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scan {
    /// Index order.
    Systematic,
    /// A fresh uniformly random permutation per sweep.
    Random,
}

/// One full pass over the variables; `conditionals[i]` resamples `state[i]`.
pub fn gibbs_sweep<T>(
    conditionals: &[&dyn Conditional<T>],
    state: &mut [T],
    rng: &mut dyn RngCore,
    scan: Scan,
) -> Result<()> {
    if conditionals.len() != state.len() {
        return Err(crate::arg("one conditional per variable is required"));
    }
    let mut order: Vec<usize> = (0..state.len()).collect();
    if scan == Scan::Random {
        order.shuffle(rng);
    }
    for i in order {
        let v = conditionals[i]
            .sample(state, rng)
            .map_err(|e| Error::Conditional { index: i, reason: e.to_string() })?;
        state[i] = v;
    }
    Ok(())
}

/// Run `sweeps` sweeps; sweep `s` draws from the stream keyed by `(chain, s)`.
/// `record` sees the state after every sweep.
pub fn run_gibbs<T>(
    conditionals: &[&dyn Conditional<T>],
    state: &mut [T],
    sweeps: usize,
    streams: &Streams,
    chain: u64,
    scan: Scan,
    mut record: impl FnMut(&[T]),
) -> Result<()> {
    for s in 0..sweeps {
        let mut rng = streams.stream(&[chain, s as u64]);
        gibbs_sweep(conditionals, state, &mut rng, scan)?;
        record(state);
    }
    Ok(())
}
