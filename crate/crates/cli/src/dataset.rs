//! Synthetic datasets with embedded ground truth and, where the posterior is
//! available in closed form, oracle summaries.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use scalebayes_core::hogwild::GaussianGibbsSystem;
use scalebayes_core::linalg;
use scalebayes_core::mcmc::Proposal;
use scalebayes_core::model::FactoredTarget;
use scalebayes_core::rng::{tag, Streams};
use scalebayes_core::special::log_sum_exp;
use scalebayes_core::vi::GaussianMixture;
use scalebayes_core::zoo::{GaussianMeanModel, LogisticRegression};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{from_value, parse_json, GridSpec, ModelSpec, SystemSpec};
use crate::error::{HarnessError, Result};

pub const DATASET_SCHEMA: &str = "scalebayes.dataset/1";

/// Observations; which fields are filled depends on the model kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBody {
    /// Row-major `n × d` observations (gaussian, mixture, grid).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub x: Vec<f64>,
    /// Row-major `n × d` features (logistic regression).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
    /// Labels in {-1, +1} (logistic regression).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<f64>,
}

/// Analytic posterior summaries of an oracle model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oracle {
    pub posterior_mean: Vec<f64>,
    pub posterior_cov: Vec<Vec<f64>>,
    /// Posterior mass of every grid point (grid models only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub model: ModelSpec,
    pub seed: u64,
    /// Parameters the data were generated from.
    pub truth: Value,
    pub data: DataBody,
    pub oracle: Option<Oracle>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn gaussian_draw(rng: &mut impl rand::RngCore) -> f64 {
    linalg::standard_normal_vec(1, rng)[0]
}

/// Draw a dataset for `model` from the data streams of `seed`.
pub fn generate(model: &ModelSpec, seed: u64) -> Result<Dataset> {
    let streams = Streams::new(seed);
    let (truth, data) = match model {
        ModelSpec::Gaussian(s) => {
            let m = GaussianMeanModel::generate(&s.truth, s.prior_var, s.noise_var, s.n, &streams);
            (json!({ "theta": s.truth }), DataBody { x: m.data().to_vec(), ..Default::default() })
        }
        ModelSpec::LogisticRegression(s) => {
            let m = LogisticRegression::generate(&s.truth, s.n, s.feature_scale, s.prior_var, &streams);
            let body = DataBody { features: m.features().to_vec(), labels: m.labels().to_vec(), ..Default::default() };
            (json!({ "theta": s.truth }), body)
        }
        ModelSpec::DiscreteMixture(s) => {
            let mut rng = streams.stream(&[tag::DATA]);
            let sd = s.noise_var.sqrt();
            let mut x = Vec::with_capacity(s.n);
            let mut z = Vec::with_capacity(s.n);
            for _ in 0..s.n {
                let k = rng.random_range(0..s.means.len());
                z.push(k);
                x.push(s.means[k] + sd * gaussian_draw(&mut rng));
            }
            (json!({ "means": s.means, "labels": z }), DataBody { x, ..Default::default() })
        }
        ModelSpec::DiscreteGrid(s) => {
            let mut rng = streams.stream(&[tag::DATA]);
            let sd = s.noise_var.sqrt();
            let x = (0..s.n).map(|_| s.truth + sd * gaussian_draw(&mut rng)).collect();
            (json!({ "theta": s.truth }), DataBody { x, ..Default::default() })
        }
        ModelSpec::GaussianSystem(s) => {
            let sys = system_of(s)?;
            (json!({ "mean": linalg::to_vec(&sys.mean()?) }), DataBody::default())
        }
    };
    let mut ds = Dataset { model: model.clone(), seed, truth, data, oracle: None };
    ds.oracle = ds.build_oracle()?;
    Ok(ds)
}

pub fn system_of(s: &SystemSpec) -> Result<GaussianGibbsSystem> {
    let n = s.potential.len();
    let j = DMatrix::from_fn(n, n, |r, c| s.precision[r][c]);
    Ok(GaussianGibbsSystem::new(j, DVector::from_column_slice(&s.potential))?)
}

/// Flat prior on a grid location with Gaussian observations. Evaluated on
/// the real line, so random-walk samplers can also run on it.
#[derive(Clone, Debug)]
pub struct GridTarget {
    pub x: Vec<f64>,
    pub noise_var: f64,
}

impl FactoredTarget for GridTarget {
    fn dim(&self) -> usize {
        1
    }
    fn n_data(&self) -> usize {
        self.x.len()
    }
    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }
    fn log_lik_term(&self, n: usize, theta: &[f64]) -> f64 {
        -0.5 * (self.x[n] - theta[0]).powi(2) / self.noise_var - 0.5 * (2.0 * PI * self.noise_var).ln()
    }
    fn grad_log_lik_term(&self, n: usize, theta: &[f64], out: &mut [f64]) {
        out[0] = (self.x[n] - theta[0]) / self.noise_var;
    }
}

/// Moves to a uniformly chosen cyclic neighbour on the grid. The grid is the
/// support, so with a flat prior this proposal keeps the chain on it.
pub struct GridProposal {
    pub grid: Vec<f64>,
}

impl GridProposal {
    /// Index of the grid point nearest to `x`.
    pub fn index(&self, x: f64) -> usize {
        let dist = |i: usize| (self.grid[i] - x).abs();
        (0..self.grid.len()).min_by(|a, b| dist(*a).total_cmp(&dist(*b))).unwrap_or(0)
    }

    pub fn neighbours(&self, i: usize) -> [usize; 2] {
        let k = self.grid.len();
        [(i + k - 1) % k, (i + 1) % k]
    }
}

impl Proposal for GridProposal {
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let [down, up] = self.neighbours(self.index(theta[0]));
        vec![self.grid[if rng.random::<bool>() { up } else { down }]]
    }
    fn log_density(&self, to: &[f64], from: &[f64]) -> f64 {
        let hits = self.neighbours(self.index(from[0])).iter().filter(|&&j| self.index(to[0]) == j).count();
        (hits as f64 / 2.0).ln()
    }
    fn is_symmetric(&self) -> bool {
        true
    }
}

/// Exact posterior over grid points.
pub fn grid_posterior(spec: &GridSpec, target: &GridTarget) -> Vec<f64> {
    let logs: Vec<f64> =
        spec.grid.iter().map(|g| (0..target.n_data()).map(|n| target.log_lik_term(n, &[*g])).sum()).collect();
    let z = log_sum_exp(&logs);
    logs.iter().map(|l| (l - z).exp()).collect()
}

/// A dataset instantiated as a model.
pub enum Problem {
    Gaussian(GaussianMeanModel),
    Logistic(LogisticRegression),
    Mixture(GaussianMixture),
    Grid(GridSpec, GridTarget),
    System(GaussianGibbsSystem),
}

impl Dataset {
    pub fn problem(&self) -> Result<Problem> {
        Ok(match &self.model {
            ModelSpec::Gaussian(s) => {
                Problem::Gaussian(GaussianMeanModel::new(s.truth.len(), s.prior_var, s.noise_var, self.data.x.clone())?)
            }
            ModelSpec::LogisticRegression(s) => Problem::Logistic(LogisticRegression::new(
                s.truth.len(),
                self.data.features.clone(),
                self.data.labels.clone(),
                s.prior_var,
            )?),
            ModelSpec::DiscreteMixture(s) => Problem::Mixture(GaussianMixture::new(
                self.data.x.clone(),
                s.means.len(),
                s.noise_var,
                s.prior_mean,
                s.prior_var,
            )?),
            ModelSpec::DiscreteGrid(s) => {
                Problem::Grid(s.clone(), GridTarget { x: self.data.x.clone(), noise_var: s.noise_var })
            }
            ModelSpec::GaussianSystem(s) => Problem::System(system_of(s)?),
        })
    }

    fn build_oracle(&self) -> Result<Option<Oracle>> {
        Ok(match self.problem()? {
            Problem::Gaussian(m) => {
                let (mean, var) = m.posterior();
                let d = mean.len();
                let cov = DMatrix::from_diagonal_element(d, d, var);
                Some(Oracle { posterior_mean: mean, posterior_cov: matrix_rows(&cov), grid_probs: None })
            }
            Problem::Grid(spec, t) => {
                let p = grid_posterior(&spec, &t);
                let mean: f64 = p.iter().zip(&spec.grid).map(|(p, g)| p * g).sum();
                let var: f64 = p.iter().zip(&spec.grid).map(|(p, g)| p * (g - mean).powi(2)).sum();
                Some(Oracle { posterior_mean: vec![mean], posterior_cov: vec![vec![var]], grid_probs: Some(p) })
            }
            Problem::System(s) => Some(Oracle {
                posterior_mean: linalg::to_vec(&s.mean()?),
                posterior_cov: matrix_rows(&s.covariance()?),
                grid_probs: None,
            }),
            Problem::Logistic(_) | Problem::Mixture(_) => None,
        })
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("schema".into(), DATASET_SCHEMA.into());
        m.insert("model".into(), self.model.to_value());
        m.insert("seed".into(), self.seed.into());
        m.insert("truth".into(), self.truth.clone());
        m.insert("data".into(), serde_json::to_value(&self.data).unwrap_or(Value::Null));
        m.insert("oracle".into(), serde_json::to_value(&self.oracle).unwrap_or(Value::Null));
        Value::Object(m)
    }

    /// Canonical serialization; identical datasets give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).unwrap_or_default();
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            schema: String,
            model: Value,
            seed: u64,
            truth: Value,
            data: Value,
            oracle: Value,
        }
        let raw: Raw = from_value(&parse_json(text)?, "")?;
        if raw.schema != DATASET_SCHEMA {
            return Err(HarnessError::schema("/schema", format!("expected `{DATASET_SCHEMA}`")));
        }
        let model = ModelSpec::parse(&raw.model, "/model")?;
        let data: DataBody = from_value(&raw.data, "/data")?;
        let oracle: Option<Oracle> = from_value(&raw.oracle, "/oracle")?;
        let ds = Dataset { model, seed: raw.seed, truth: raw.truth, data, oracle };
        ds.problem()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GaussianSpec, MixtureSpec};

    #[test]
    fn grid_posterior_is_normalized_and_peaks_near_the_data() {
        let spec = GridSpec { grid: vec![-1.0, 0.0, 1.0, 2.0], truth: 1.0, n: 6, noise_var: 0.5 };
        let ds = generate(&ModelSpec::DiscreteGrid(spec.clone()), 3).unwrap();
        let p = ds.oracle.unwrap().grid_probs.unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let xbar = ds.data.x.iter().sum::<f64>() / 6.0;
        let best = (0..4).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap();
        let nearest = (0..4).min_by(|a, b| (spec.grid[*a] - xbar).abs().total_cmp(&(spec.grid[*b] - xbar).abs())).unwrap();
        assert_eq!(best, nearest);
    }

    #[test]
    fn mixture_labels_follow_the_components() {
        let spec = MixtureSpec { means: vec![-5.0, 5.0], n: 200, noise_var: 0.25, prior_mean: 0.0, prior_var: 100.0 };
        let ds = generate(&ModelSpec::DiscreteMixture(spec), 4).unwrap();
        let labels = ds.truth["labels"].as_array().unwrap();
        for (x, z) in ds.data.x.iter().zip(labels) {
            assert_eq!(*x > 0.0, z.as_u64() == Some(1));
        }
        assert!(ds.oracle.is_none());
    }

    #[test]
    fn parse_inverts_serialization() {
        let spec = GaussianSpec { truth: vec![0.1, -0.4], n: 7, prior_var: 2.0, noise_var: 0.3 };
        let ds = generate(&ModelSpec::Gaussian(spec), 5).unwrap();
        assert_eq!(Dataset::parse(&ds.to_json()).unwrap(), ds);
    }
}
