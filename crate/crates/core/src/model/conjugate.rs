use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::expfam::{
    BernoulliConjugatePrior, Dirichlet, ExpFamily, MvNormalInfo, NormalMeanPrior, PoissonConjugatePrior,
};
use crate::{arg, linalg, Result};

/// A likelihood together with its conjugate prior family.
///
/// Observing `x` adds `likelihood_stat(x)` to the prior's natural parameter.
pub trait ConjugatePair {
    fn prior(&self) -> &dyn ExpFamily;
    /// The natural-parameter increment contributed by one observation.
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `η' = η + Σ_n increment(x_n)`.
pub fn conjugate_posterior_update<D: AsRef<[f64]>>(
    pair: &dyn ConjugatePair,
    eta: &[f64],
    data: &[D],
) -> Result<Vec<f64>> {
    let mut out = eta.to_vec();
    for x in data {
        let inc = pair.likelihood_stat(x.as_ref())?;
        for (o, i) in out.iter_mut().zip(&inc) {
            *o += i;
        }
    }
    Ok(out)
}

/// Bernoulli observations with a Beta prior; one observation adds `(x, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct BetaBernoulli;

impl ConjugatePair for BetaBernoulli {
    fn prior(&self) -> &dyn ExpFamily {
        &BernoulliConjugatePrior
    }
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x[0] != 0.0 && x[0] != 1.0 {
            return Err(arg("Bernoulli observation must be 0 or 1"));
        }
        Ok(vec![x[0], 1.0])
    }
}

/// Poisson counts with a Gamma prior; one observation adds `(x, 1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GammaPoisson;

impl ConjugatePair for GammaPoisson {
    fn prior(&self) -> &dyn ExpFamily {
        &PoissonConjugatePrior
    }
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x[0] < 0.0 || libm::trunc(x[0]) != x[0] {
            return Err(arg("Poisson observation must be a nonnegative integer"));
        }
        Ok(vec![x[0], 1.0])
    }
}

/// Gaussian observations with known variance and a Gaussian prior on the
/// mean; one observation adds `(x/σ², 1/σ²)`.
#[derive(Clone, Copy, Debug)]
pub struct NormalMean {
    pub noise_var: f64,
}

impl ConjugatePair for NormalMean {
    fn prior(&self) -> &dyn ExpFamily {
        &NormalMeanPrior
    }
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !x[0].is_finite() {
            return Err(arg("observation must be finite"));
        }
        Ok(vec![x[0] / self.noise_var, 1.0 / self.noise_var])
    }
}

/// Categorical observations (category index in `x[0]`) with a Dirichlet prior.
#[derive(Clone, Copy, Debug)]
pub struct DirichletCategorical {
    pub family: Dirichlet,
}

impl DirichletCategorical {
    pub fn new(k: usize) -> Self {
        Self { family: Dirichlet { k } }
    }
}

impl ConjugatePair for DirichletCategorical {
    fn prior(&self) -> &dyn ExpFamily {
        &self.family
    }
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.family.k;
        let c = x[0];
        if c < 0.0 || libm::trunc(c) != c || c as usize >= k {
            return Err(arg("category index out of range"));
        }
        let mut inc = vec![0.0; k];
        inc[c as usize] = 1.0;
        Ok(inc)
    }
}

/// `d`-dimensional Gaussian observations with known covariance `Σ` and a
/// Gaussian prior on the mean; one observation adds `(Σ⁻¹x, vec Σ⁻¹)`.
#[derive(Clone, Debug)]
pub struct MvNormalMean {
    family: MvNormalInfo,
    noise_precision: DMatrix<f64>,
}

impl MvNormalMean {
    pub fn new(noise_cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            family: MvNormalInfo { d: noise_cov.nrows() },
            noise_precision: linalg::spd_inverse(noise_cov, 1)?,
        })
    }
}

impl ConjugatePair for MvNormalMean {
    fn prior(&self) -> &dyn ExpFamily {
        &self.family
    }
    fn likelihood_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.family.d {
            return Err(arg("observation has the wrong dimension"));
        }
        let h = &self.noise_precision * DVector::from_column_slice(x);
        Ok(MvNormalInfo::join(&h, &self.noise_precision))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_data_is_identity() {
        let eta = [0.25, 3.0];
        let out = conjugate_posterior_update::<[f64; 1]>(&BetaBernoulli, &eta, &[]).unwrap();
        assert_eq!(out, eta);
    }

    #[test]
    fn beta_bernoulli_counts() {
        let data = [[1.0], [1.0], [0.0], [1.0]];
        let out = conjugate_posterior_update(&BetaBernoulli, &[0.0, 0.0], &data).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
        assert_eq!(BernoulliConjugatePrior::beta_shapes(&out), (4.0, 2.0));
        assert!(conjugate_posterior_update(&BetaBernoulli, &[0.0, 0.0], &[[0.5]]).is_err());
    }

    #[test]
    fn normal_mean_batch_equals_sequential_halves() {
        let pair = NormalMean { noise_var: 0.5 };
        let data: Vec<[f64; 1]> = (0..10).map(|i| [i as f64 * 0.37 - 1.0]).collect();
        let eta = NormalMeanPrior::natural(0.0, 2.0);
        let batch = conjugate_posterior_update(&pair, &eta, &data).unwrap();
        let half = conjugate_posterior_update(&pair, &eta, &data[..5]).unwrap();
        let seq = conjugate_posterior_update(&pair, &half, &data[5..]).unwrap();
        assert_eq!(batch, seq);
    }

    #[test]
    fn dirichlet_counts() {
        let pair = DirichletCategorical::new(3);
        let out = conjugate_posterior_update(&pair, &[0.0; 3], &[[2.0], [0.0], [2.0]]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 2.0]);
        assert!(pair.likelihood_stat(&[3.0]).is_err());
    }

    proptest! {
        // Integer-valued increments make float addition exact, so the
        // commutativity and associativity checks can use equality.
        #[test]
        fn updates_commute_and_associate(xs in proptest::collection::vec(0u32..20, 0..30), split in 0usize..30) {
            let data: Vec<[f64; 1]> = xs.iter().map(|&x| [x as f64]).collect();
            let split = split.min(data.len());
            let eta = [0.5, 1.0];
            let whole = conjugate_posterior_update(&GammaPoisson, &eta, &data).unwrap();
            let a = conjugate_posterior_update(&GammaPoisson, &eta, &data[..split]).unwrap();
            let ab = conjugate_posterior_update(&GammaPoisson, &a, &data[split..]).unwrap();
            let b = conjugate_posterior_update(&GammaPoisson, &eta, &data[split..]).unwrap();
            let ba = conjugate_posterior_update(&GammaPoisson, &b, &data[..split]).unwrap();
            let mut rev = data.clone();
            rev.reverse();
            let reversed = conjugate_posterior_update(&GammaPoisson, &eta, &rev).unwrap();
            prop_assert_eq!(&whole, &ab);
            prop_assert_eq!(&whole, &ba);
            prop_assert_eq!(&whole, &reversed);
        }
    }
}
