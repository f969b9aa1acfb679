use super::chain::SampleBuffer;
use crate::{arg, Result};

/// Which draws an estimator averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    All,
    /// The last `⌈T/2⌉` draws.
    LastHalf,
    LastOne,
}

/// Monte Carlo estimate of `E[f(θ)]` from recorded draws.
pub fn mc_estimate(buffer: &SampleBuffer, f: &dyn Fn(&[f64]) -> f64, policy: Policy) -> Result<f64> {
    let t = buffer.len();
    if t == 0 {
        return Err(arg("empty sample buffer"));
    }
    let from = match policy {
        Policy::All => 0,
        Policy::LastHalf => t - t.div_ceil(2),
        Policy::LastOne => t - 1,
    };
    let sum: f64 = (from..t).map(|i| f(buffer.row(i))).sum();
    Ok(sum / (t - from) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn policies_on_a_short_chain() {
        let b = SampleBuffer::from_rows(1, alloc::vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let id = |x: &[f64]| x[0];
        assert_eq!(mc_estimate(&b, &id, Policy::All).unwrap(), 1.0);
        assert_eq!(mc_estimate(&b, &id, Policy::LastHalf).unwrap(), 2.0);
        assert_eq!(mc_estimate(&b, &id, Policy::LastOne).unwrap(), 2.0);
        let odd = SampleBuffer::from_rows(1, alloc::vec![0.0, 3.0, 6.0]).unwrap();
        assert_eq!(mc_estimate(&odd, &id, Policy::LastHalf).unwrap(), 4.5);
    }

    #[test]
    fn constant_chain_and_empty_buffer() {
        let b = SampleBuffer::from_rows(1, alloc::vec![1.5; 7]).unwrap();
        let sq = |x: &[f64]| x[0] * x[0];
        for p in [Policy::All, Policy::LastHalf, Policy::LastOne] {
            assert_eq!(mc_estimate(&b, &sq, p).unwrap(), 2.25);
        }
        assert!(mc_estimate(&SampleBuffer::new(1), &sq, Policy::All).is_err());
    }

    #[test]
    fn iid_normal_mean_within_clt_bound() {
        let mut rng = Streams::new(21).stream(&[]);
        let t = 100_000;
        let draws: alloc::vec::Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = SampleBuffer::from_rows(1, draws).unwrap();
        let est = mc_estimate(&b, &|x: &[f64]| x[0], Policy::All).unwrap();
        assert!(est.abs() < 3.0 / (t as f64).sqrt());
    }
}
