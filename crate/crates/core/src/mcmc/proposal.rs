use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

/// A proposal distribution `q(θ' | θ)`.
pub trait Proposal {
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
    /// `log q(to | from)`.
    fn log_density(&self, to: &[f64], from: &[f64]) -> f64;
    fn is_symmetric(&self) -> bool;
}

impl<P: Proposal + ?Sized> Proposal for &P {
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).sample(theta, rng)
    }
    fn log_density(&self, to: &[f64], from: &[f64]) -> f64 {
        (**self).log_density(to, from)
    }
    fn is_symmetric(&self) -> bool {
        (**self).is_symmetric()
    }
}

fn diag_normal_ln_pdf(x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - libm::log(*s) - 0.5 * libm::log(2.0 * PI)
        })
        .sum()
}

/// Gaussian random walk `θ' = θ + s ⊙ z` with per-coordinate scales.
#[derive(Clone, Debug)]
pub struct RandomWalk {
    scale: Vec<f64>,
}

impl RandomWalk {
    pub fn new(scale: Vec<f64>) -> Self {
        Self { scale }
    }

    pub fn isotropic(dim: usize, scale: f64) -> Self {
        Self { scale: alloc::vec![scale; dim] }
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

impl Proposal for RandomWalk {
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.scale)
            .map(|(t, s)| {
                let z: f64 = StandardNormal.sample(rng);
                t + s * z
            })
            .collect()
    }
    fn log_density(&self, to: &[f64], from: &[f64]) -> f64 {
        diag_normal_ln_pdf(to, from, &self.scale)
    }
    fn is_symmetric(&self) -> bool {
        true
    }
}

/// Independence proposal `θ' ~ N(center, diag(scale²))`, ignoring `θ`.
#[derive(Clone, Debug)]
pub struct GaussianIndependence {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl GaussianIndependence {
    pub fn new(center: Vec<f64>, scale: Vec<f64>) -> Self {
        Self { center, scale }
    }
}

impl Proposal for GaussianIndependence {
    fn sample(&self, _theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.scale)
            .map(|(c, s)| {
                let z: f64 = StandardNormal.sample(rng);
                c + s * z
            })
            .collect()
    }
    fn log_density(&self, to: &[f64], _from: &[f64]) -> f64 {
        diag_normal_ln_pdf(to, &self.center, &self.scale)
    }
    fn is_symmetric(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn random_walk_is_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let q = RandomWalk::new(alloc::vec![0.5, 1.0, 2.0]);
            prop_assert!(q.is_symmetric());
            prop_assert!((q.log_density(&a, &b) - q.log_density(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn independence_proposal_is_asymmetric() {
        let q = GaussianIndependence::new(alloc::vec![0.0], alloc::vec![1.0]);
        assert!(!q.is_symmetric());
        assert!((q.log_density(&[1.0], &[3.0]) - q.log_density(&[3.0], &[1.0])).abs() > 1.0);
        let mut rng = Streams::new(1).stream(&[]);
        let x = q.sample(&[100.0], &mut rng);
        assert!(x[0].abs() < 10.0);
    }
}
