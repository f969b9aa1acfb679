//! Mean-field variational inference with exponential-family factors.
//!
//! `q(x) = Π_A q_A(x_A)` where every factor is an [`ExpFamily`] member in
//! natural form. A model exposes the expectation of its log joint under `q`
//! and the partial expectation `E_{q_{A^c}}[log p̄(x_A, X_{A^c})]` as a
//! function of `x_A`; the optimal factor update is then identified inside the
//! family without model-specific algebra. Conjugate models can additionally
//! report their parent/child messages, giving the closed-form update.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::model::{expfam_mean, Categorical, ConjugatePair, ExpFamily, Gaussian, NormalMeanPrior};
use crate::rng::Streams;
use crate::{arg, Error, Result};

pub type Family = Arc<dyn ExpFamily + Send + Sync>;

/// One factor `q_A` with its current natural parameter.
#[derive(Clone)]
pub struct VariationalFactor {
    pub family: Family,
    eta: Vec<f64>,
}

impl core::fmt::Debug for VariationalFactor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("VariationalFactor").field("family", &self.family.base_measure_desc()).field("eta", &self.eta).finish()
    }
}

impl VariationalFactor {
    pub fn new(family: Family, eta: Vec<f64>) -> Result<Self> {
        if eta.len() != family.stat_dim() || !family.in_domain(&eta) {
            return Err(Error::Domain("variational factor"));
        }
        Ok(Self { family, eta })
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// `E_q[t(x)]`.
    pub fn mean_stats(&self) -> Result<Vec<f64>> {
        expfam_mean(self.family.as_ref(), &self.eta)
    }

    pub fn entropy(&self) -> Result<f64> {
        expfam_entropy(self.family.as_ref(), &self.eta)
    }
}

/// `H = log Z(η) − ⟨η, E[t]⟩ − log h` for families with constant `h`.
pub fn expfam_entropy(family: &dyn ExpFamily, eta: &[f64]) -> Result<f64> {
    let log_h = family
        .constant_log_base_measure()
        .ok_or_else(|| Error::Unsupported(format!("entropy of {}", family.base_measure_desc())))?;
    let mean = expfam_mean(family, eta)?;
    Ok(family.log_partition(eta) - eta.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() - log_h)
}

/// A product of factors over disjoint blocks of the latent variables; block
/// `A` is whatever factor `A` is a distribution over.
#[derive(Clone, Debug)]
pub struct MeanFieldApprox {
    factors: Vec<VariationalFactor>,
}

impl MeanFieldApprox {
    pub fn new(factors: Vec<VariationalFactor>) -> Self {
        Self { factors }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factor(&self, a: usize) -> &VariationalFactor {
        &self.factors[a]
    }

    pub fn set_eta(&mut self, a: usize, eta: Vec<f64>) -> Result<()> {
        let f = &self.factors[a];
        self.factors[a] = VariationalFactor::new(f.family.clone(), eta)?;
        Ok(())
    }

    pub fn mean_stats(&self, a: usize) -> Result<Vec<f64>> {
        self.factors[a].mean_stats()
    }

    /// Draw every factor once.
    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> Vec<Vec<f64>> {
        self.factors.iter().map(|f| f.family.sample(&f.eta, rng)).collect()
    }
}

/// An expectation that may carry a Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expectation {
    pub value: f64,
    /// `Some` when the value was estimated by sampling.
    pub mc_se: Option<f64>,
}

impl Expectation {
    pub fn exact(value: f64) -> Self {
        Self { value, mc_se: None }
    }
}

/// Messages into factor `A` of a conjugate-exponential model: the expected
/// natural parameter from its parents and the expected `(t(child), 1)`
/// statistic contributed by each child.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateMessages {
    pub parent: Vec<f64>,
    pub children: Vec<Vec<f64>>,
}

/// A target `p̄` for mean-field inference, with one latent block per factor.
pub trait MeanFieldModel {
    fn n_factors(&self) -> usize;
    /// `E_q[log p̄(X)]`.
    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation>;
    /// `E_{q_{A^c}}[log p̄(x_A, X_{A^c})]` up to a constant not depending on `x_A`.
    fn partial_expectation(&self, a: usize, x_a: &[f64], q: &MeanFieldApprox) -> Result<f64>;
    /// Points of factor `A`'s sample space at which the partial expectation
    /// identifies the optimal natural parameter (statistics in general position).
    fn probe_points(&self, a: usize) -> Vec<Vec<f64>>;
    /// `log Z = log ∫ p̄`, when known in closed form.
    fn log_normalizer(&self) -> Option<f64> {
        None
    }
    fn conjugate_messages(&self, _a: usize, _q: &MeanFieldApprox) -> Result<ConjugateMessages> {
        Err(Error::Unsupported("model has no conjugate structure".into()))
    }
}

/// `L[q] = E_q[log p̄] + H[q] ≤ log Z`.
pub fn elbo<M: MeanFieldModel + ?Sized>(q: &MeanFieldApprox, model: &M) -> Result<Expectation> {
    if q.len() != model.n_factors() {
        return Err(arg("approximation and model disagree on the number of factors"));
    }
    let e = model.expected_log_joint(q)?;
    let h: f64 = q.factors.iter().map(VariationalFactor::entropy).sum::<Result<f64>>()?;
    Ok(Expectation { value: e.value + h, mc_se: e.mc_se })
}

/// The optimal factor `q_A ∝ exp{E_{q_{A^c}}[log p̄]}`, found by matching
/// `⟨η, t(x)⟩ + c` to the partial expectation at the probe points (least
/// squares, minimum norm for over-parameterized families).
pub fn coordinate_update<M: MeanFieldModel + ?Sized>(q: &mut MeanFieldApprox, a: usize, model: &M) -> Result<()> {
    let fam = q.factors[a].family.clone();
    let k = fam.stat_dim();
    let pts = model.probe_points(a);
    let mut design = DMatrix::zeros(pts.len(), k + 1);
    let mut rhs = DVector::zeros(pts.len());
    for (r, x) in pts.iter().enumerate() {
        let t = fam.statistic(x);
        for c in 0..k {
            design[(r, c)] = t[c];
        }
        design[(r, k)] = 1.0;
        rhs[r] = model.partial_expectation(a, x, q)? - fam.log_base_measure(x);
    }
    let sol = design
        .svd(true, true)
        .solve(&rhs, 1e-13)
        .map_err(|e| Error::Numeric(format!("factor {a}: {e}")))?;
    let eta: Vec<f64> = sol.iter().take(k).copied().collect();
    q.set_eta(a, eta).map_err(|_| Error::Numeric(format!("factor {a}: optimal update left the family's domain")))
}

/// `η̃_A = E[η(parents)] + Σ_children E[(t(child), 1)]`.
pub fn conjugate_factor_update<M: MeanFieldModel + ?Sized>(q: &mut MeanFieldApprox, a: usize, model: &M) -> Result<()> {
    let msg = model.conjugate_messages(a, q)?;
    let mut eta = msg.parent;
    for c in &msg.children {
        if c.len() != eta.len() {
            return Err(Error::Logic("child message has the wrong dimension".into()));
        }
        eta.iter_mut().zip(c).for_each(|(e, v)| *e += v);
    }
    q.set_eta(a, eta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    Generic,
    Conjugate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub rule: UpdateRule,
    /// Stop when a sweep changes the ELBO by less than this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { rule: UpdateRule::Generic, tol: 1e-8, max_sweeps: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// ELBO before the first sweep and after every sweep.
    pub elbo: Vec<f64>,
    pub converged: bool,
    /// Largest decrease of the ELBO across single factor updates.
    pub max_decrease: f64,
}

/// Coordinate ascent: sweeps over factors in index order until the ELBO
/// settles.
pub fn mean_field_fit<M: MeanFieldModel + ?Sized>(model: &M, q: &mut MeanFieldApprox, cfg: FitConfig) -> Result<FitReport> {
    let mut trace = vec![elbo(q, model)?.value];
    let mut max_decrease = 0.0f64;
    let mut last = trace[0];
    for _ in 0..cfg.max_sweeps {
        for a in 0..q.len() {
            match cfg.rule {
                UpdateRule::Generic => coordinate_update(q, a, model)?,
                UpdateRule::Conjugate => conjugate_factor_update(q, a, model)?,
            }
            let now = elbo(q, model)?.value;
            max_decrease = max_decrease.max(last - now);
            last = now;
        }
        let prev = *trace.last().unwrap_or(&last);
        trace.push(last);
        if (last - prev).abs() < cfg.tol {
            return Ok(FitReport { elbo: trace, converged: true, max_decrease });
        }
    }
    Ok(FitReport { elbo: trace, converged: false, max_decrease })
}

fn gaussian_family() -> Family {
    Arc::new(Gaussian)
}

fn normal_mean_family() -> Family {
    Arc::new(NormalMeanPrior)
}

/// `(E x, E x²)` of a factor in the `Gaussian` or `NormalMeanPrior` family.
fn first_two(q: &MeanFieldApprox, a: usize) -> Result<(f64, f64)> {
    let f = q.factor(a);
    let m = f.mean_stats()?;
    match f.family.stat_dim() {
        2 if f.family.statistic(&[2.0])[1] == 4.0 => Ok((m[0], m[1])),
        2 => Ok((m[0], -2.0 * m[1])),
        _ => Err(Error::Logic(format!("factor {a} is not a scalar Gaussian"))),
    }
}

const SCALAR_PROBES: [f64; 3] = [-1.0, 0.0, 1.0];

fn scalar_probes() -> Vec<Vec<f64>> {
    SCALAR_PROBES.iter().map(|x| vec![*x]).collect()
}

/// `p̄(x) = exp(−½ xᵀJx + hᵀx)`, one scalar Gaussian factor per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    precision: DMatrix<f64>,
    potential: DVector<f64>,
}

impl GaussianTarget {
    pub fn new(precision: DMatrix<f64>, potential: DVector<f64>) -> Result<Self> {
        linalg::cholesky(&precision, 0)?;
        if potential.len() != precision.nrows() {
            return Err(arg("potential has the wrong length"));
        }
        Ok(Self { precision, potential })
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(linalg::spd_inverse(&self.precision, 0)? * &self.potential)
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.precision, 0)
    }

    /// A product of `N(mean_i, var_i)` factors.
    pub fn approx(&self, means: &[f64], vars: &[f64]) -> Result<MeanFieldApprox> {
        Ok(MeanFieldApprox::new(
            means
                .iter()
                .zip(vars)
                .map(|(m, v)| VariationalFactor::new(gaussian_family(), Gaussian::natural(*m, *v).to_vec()))
                .collect::<Result<_>>()?,
        ))
    }

    fn field(&self, a: usize, q: &MeanFieldApprox) -> Result<f64> {
        let mut f = self.potential[a];
        for b in (0..q.len()).filter(|b| *b != a) {
            f -= self.precision[(a, b)] * first_two(q, b)?.0;
        }
        Ok(f)
    }
}

impl MeanFieldModel for GaussianTarget {
    fn n_factors(&self) -> usize {
        self.potential.len()
    }

    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation> {
        let n = self.n_factors();
        let m: Vec<(f64, f64)> = (0..n).map(|i| first_two(q, i)).collect::<Result<_>>()?;
        let mut v = 0.0;
        for i in 0..n {
            v += self.potential[i] * m[i].0 - 0.5 * self.precision[(i, i)] * m[i].1;
            for j in 0..i {
                v -= self.precision[(i, j)] * m[i].0 * m[j].0;
            }
        }
        Ok(Expectation::exact(v))
    }

    fn partial_expectation(&self, a: usize, x: &[f64], q: &MeanFieldApprox) -> Result<f64> {
        Ok(x[0] * self.field(a, q)? - 0.5 * self.precision[(a, a)] * x[0] * x[0])
    }

    fn probe_points(&self, _a: usize) -> Vec<Vec<f64>> {
        scalar_probes()
    }

    fn log_normalizer(&self) -> Option<f64> {
        let n = self.n_factors() as f64;
        let cov = self.covariance().ok()?;
        let log_det = linalg::spd_log_det(&self.precision, 0).ok()?;
        let quad = self.potential.dot(&(&cov * &self.potential));
        Some(0.5 * n * libm::log(2.0 * core::f64::consts::PI) - 0.5 * log_det + 0.5 * quad)
    }

    fn conjugate_messages(&self, a: usize, q: &MeanFieldApprox) -> Result<ConjugateMessages> {
        Ok(ConjugateMessages { parent: vec![self.field(a, q)?, -0.5 * self.precision[(a, a)]], children: Vec::new() })
    }
}

fn ln_normal(x2: f64, x: f64, m: f64, m2: f64, var: f64) -> f64 {
    // E log N(X; M, var) from E X², E X, E M, E M² of independent X, M.
    -0.5 * libm::log(2.0 * core::f64::consts::PI * var) - (x2 - 2.0 * x * m + m2) / (2.0 * var)
}

/// `μ ~ N(m0, v0)`, `θ_j | μ ~ N(μ, s2)`, `y_j | θ_j ~ N(θ_j, σ2)` with `y`
/// observed. Factor 0 is `μ`, factor `j + 1` is `θ_j`; all factors use the
/// `(θ, −θ²/2)` statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalNormal {
    pub m0: f64,
    pub v0: f64,
    pub s2: f64,
    pub sigma2: f64,
    pub y: Vec<f64>,
}

impl HierarchicalNormal {
    pub fn approx(&self, means: &[f64], vars: &[f64]) -> Result<MeanFieldApprox> {
        if means.len() != self.y.len() + 1 || vars.len() != means.len() {
            return Err(arg("one mean and variance per factor"));
        }
        Ok(MeanFieldApprox::new(
            means
                .iter()
                .zip(vars)
                .map(|(m, v)| VariationalFactor::new(normal_mean_family(), NormalMeanPrior::natural(*m, *v).to_vec()))
                .collect::<Result<_>>()?,
        ))
    }
}

impl MeanFieldModel for HierarchicalNormal {
    fn n_factors(&self) -> usize {
        self.y.len() + 1
    }

    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation> {
        let (mu, mu2) = first_two(q, 0)?;
        let mut v = ln_normal(mu2, mu, self.m0, self.m0 * self.m0, self.v0);
        for (j, y) in self.y.iter().enumerate() {
            let (t, t2) = first_two(q, j + 1)?;
            v += ln_normal(t2, t, mu, mu2, self.s2) + ln_normal(y * y, *y, t, t2, self.sigma2);
        }
        Ok(Expectation::exact(v))
    }

    fn partial_expectation(&self, a: usize, x: &[f64], q: &MeanFieldApprox) -> Result<f64> {
        let x = x[0];
        if a == 0 {
            let mut v = -(x - self.m0) * (x - self.m0) / (2.0 * self.v0);
            for j in 0..self.y.len() {
                let t = first_two(q, j + 1)?.0;
                v -= (x * x - 2.0 * x * t) / (2.0 * self.s2);
            }
            Ok(v)
        } else {
            let mu = first_two(q, 0)?.0;
            let y = self.y[a - 1];
            Ok(-(x * x - 2.0 * x * mu) / (2.0 * self.s2) - (y - x) * (y - x) / (2.0 * self.sigma2))
        }
    }

    fn probe_points(&self, _a: usize) -> Vec<Vec<f64>> {
        scalar_probes()
    }

    fn log_normalizer(&self) -> Option<f64> {
        let n = self.y.len();
        let cov = DMatrix::from_fn(n, n, |i, j| self.v0 + if i == j { self.s2 + self.sigma2 } else { 0.0 });
        linalg::mvn_ln_pdf(&DVector::from_column_slice(&self.y), &DVector::from_element(n, self.m0), &cov).ok()
    }

    fn conjugate_messages(&self, a: usize, q: &MeanFieldApprox) -> Result<ConjugateMessages> {
        if a == 0 {
            let children = (0..self.y.len())
                .map(|j| Ok(vec![first_two(q, j + 1)?.0 / self.s2, 1.0 / self.s2]))
                .collect::<Result<_>>()?;
            Ok(ConjugateMessages { parent: NormalMeanPrior::natural(self.m0, self.v0).to_vec(), children })
        } else {
            let mu = first_two(q, 0)?.0;
            let y = self.y[a - 1];
            Ok(ConjugateMessages { parent: vec![mu / self.s2, 1.0 / self.s2], children: vec![vec![y / self.sigma2, 1.0 / self.sigma2]] })
        }
    }
}

/// One global parameter with a conjugate prior and fully observed data.
/// `p̄(θ) = prior(θ) Π_n exp⟨inc(x_n), t(θ)⟩`, whose normalizer is
/// `Z(η_post) / Z(η_prior)`.
#[derive(Clone)]
pub struct ConjugateDataModel {
    pub pair: Arc<dyn ConjugatePair + Send + Sync>,
    pub prior_eta: Vec<f64>,
    pub data: Vec<Vec<f64>>,
    probes: Vec<Vec<f64>>,
}

impl ConjugateDataModel {
    /// `probes` must put the prior family's statistic in general position.
    pub fn new(pair: Arc<dyn ConjugatePair + Send + Sync>, prior_eta: Vec<f64>, data: Vec<Vec<f64>>, probes: Vec<Vec<f64>>) -> Result<Self> {
        if !pair.prior().in_domain(&prior_eta) {
            return Err(Error::Domain("conjugate prior"));
        }
        Ok(Self { pair, prior_eta, data, probes })
    }

    pub fn posterior_eta(&self) -> Result<Vec<f64>> {
        crate::model::conjugate_posterior_update(self.pair.as_ref(), &self.prior_eta, &self.data)
    }

    pub fn family(&self) -> Family {
        Arc::new(PriorFamily(self.pair.clone()))
    }
}

/// The prior family of a conjugate pair as a shareable handle.
struct PriorFamily(Arc<dyn ConjugatePair + Send + Sync>);

impl ExpFamily for PriorFamily {
    fn stat_dim(&self) -> usize {
        self.0.prior().stat_dim()
    }
    fn sample_dim(&self) -> usize {
        self.0.prior().sample_dim()
    }
    fn statistic(&self, x: &[f64]) -> Vec<f64> {
        self.0.prior().statistic(x)
    }
    fn log_partition(&self, eta: &[f64]) -> f64 {
        self.0.prior().log_partition(eta)
    }
    fn in_domain(&self, eta: &[f64]) -> bool {
        self.0.prior().in_domain(eta)
    }
    fn base_measure_desc(&self) -> &'static str {
        self.0.prior().base_measure_desc()
    }
    fn log_base_measure(&self, x: &[f64]) -> f64 {
        self.0.prior().log_base_measure(x)
    }
    fn constant_log_base_measure(&self) -> Option<f64> {
        self.0.prior().constant_log_base_measure()
    }
    fn sample(&self, eta: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.0.prior().sample(eta, rng)
    }
    fn closed_form_mean(&self, eta: &[f64]) -> Option<Vec<f64>> {
        self.0.prior().closed_form_mean(eta)
    }
    fn closed_form_fisher(&self, eta: &[f64]) -> Option<DMatrix<f64>> {
        self.0.prior().closed_form_fisher(eta)
    }
}

impl MeanFieldModel for ConjugateDataModel {
    fn n_factors(&self) -> usize {
        1
    }

    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation> {
        let post = self.posterior_eta()?;
        let m = q.mean_stats(0)?;
        let fam = self.pair.prior();
        let lh = fam.constant_log_base_measure().unwrap_or(0.0);
        Ok(Expectation::exact(lh + post.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() - fam.log_partition(&self.prior_eta)))
    }

    fn partial_expectation(&self, _a: usize, x: &[f64], _q: &MeanFieldApprox) -> Result<f64> {
        let fam = self.pair.prior();
        let t = fam.statistic(x);
        Ok(fam.log_base_measure(x) + self.posterior_eta()?.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>())
    }

    fn probe_points(&self, _a: usize) -> Vec<Vec<f64>> {
        self.probes.clone()
    }

    fn log_normalizer(&self) -> Option<f64> {
        let fam = self.pair.prior();
        Some(fam.log_partition(&self.posterior_eta().ok()?) - fam.log_partition(&self.prior_eta))
    }

    fn conjugate_messages(&self, _a: usize, _q: &MeanFieldApprox) -> Result<ConjugateMessages> {
        let children = self.data.iter().map(|x| self.pair.likelihood_stat(x)).collect::<Result<_>>()?;
        Ok(ConjugateMessages { parent: self.prior_eta.clone(), children })
    }
}

/// One-dimensional Gaussian mixture with known noise variance and equal
/// weights: `μ_c ~ N(m0, v0)`, `z_n ~ Uniform(K)`, `x_n | z_n ~ N(μ_{z_n}, σ²)`.
/// Factors `0..K` are the means, `K..K+N` the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub data: Vec<f64>,
    pub k: usize,
    pub noise_var: f64,
    pub prior_mean: f64,
    pub prior_var: f64,
}

impl GaussianMixture {
    pub fn new(data: Vec<f64>, k: usize, noise_var: f64, prior_mean: f64, prior_var: f64) -> Result<Self> {
        if k == 0 || !(noise_var > 0.0) || !(prior_var > 0.0) {
            return Err(arg("mixture needs K ≥ 1 and positive variances"));
        }
        Ok(Self { data, k, noise_var, prior_mean, prior_var })
    }

    /// Means at `init_means` with prior variance, labels uniform.
    pub fn approx(&self, init_means: &[f64]) -> Result<MeanFieldApprox> {
        if init_means.len() != self.k {
            return Err(arg("one initial mean per component"));
        }
        let mut f: Vec<VariationalFactor> = init_means
            .iter()
            .map(|m| VariationalFactor::new(normal_mean_family(), NormalMeanPrior::natural(*m, self.prior_var).to_vec()))
            .collect::<Result<_>>()?;
        let cat: Family = Arc::new(Categorical { k: self.k });
        for _ in &self.data {
            f.push(VariationalFactor::new(cat.clone(), vec![0.0; self.k])?);
        }
        Ok(MeanFieldApprox::new(f))
    }

    /// Natural parameter of the label factor of datum `x` given the mean
    /// factors' `(E μ_c, E μ_c²)`.
    pub fn label_natural(&self, x: f64, means: &[(f64, f64)]) -> Vec<f64> {
        let lw = -libm::log(self.k as f64);
        means.iter().map(|(m, m2)| lw + ln_normal(x * x, x, *m, *m2, self.noise_var)).collect()
    }

    /// Expected global statistic `Σ_n r_nc (x_n/σ², 1/σ²)` per component,
    /// concatenated, for labels `r`.
    pub fn global_stats(&self, xs: &[f64], resp: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.k];
        for (x, r) in xs.iter().zip(resp) {
            for c in 0..self.k {
                out[2 * c] += r[c] * x / self.noise_var;
                out[2 * c + 1] += r[c] / self.noise_var;
            }
        }
        out
    }

    pub fn prior_natural(&self) -> Vec<f64> {
        (0..self.k).flat_map(|_| NormalMeanPrior::natural(self.prior_mean, self.prior_var)).collect()
    }

    fn means(&self, q: &MeanFieldApprox) -> Result<Vec<(f64, f64)>> {
        (0..self.k).map(|c| first_two(q, c)).collect()
    }
}

impl MeanFieldModel for GaussianMixture {
    fn n_factors(&self) -> usize {
        self.k + self.data.len()
    }

    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation> {
        let means = self.means(q)?;
        let (m0, v0) = (self.prior_mean, self.prior_var);
        let mut v: f64 = means.iter().map(|(m, m2)| ln_normal(*m2, *m, m0, m0 * m0, v0)).sum();
        for (n, x) in self.data.iter().enumerate() {
            let r = q.mean_stats(self.k + n)?;
            let nat = self.label_natural(*x, &means);
            v += r.iter().zip(&nat).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(Expectation::exact(v))
    }

    fn partial_expectation(&self, a: usize, x: &[f64], q: &MeanFieldApprox) -> Result<f64> {
        if a < self.k {
            let mu = x[0];
            let mut v = -(mu - self.prior_mean) * (mu - self.prior_mean) / (2.0 * self.prior_var);
            for (n, xn) in self.data.iter().enumerate() {
                let r = q.mean_stats(self.k + n)?[a];
                v -= r * (xn - mu) * (xn - mu) / (2.0 * self.noise_var);
            }
            Ok(v)
        } else {
            let c = x[0] as usize;
            let means = self.means(q)?;
            Ok(self.label_natural(self.data[a - self.k], &means)[c])
        }
    }

    fn probe_points(&self, a: usize) -> Vec<Vec<f64>> {
        if a < self.k {
            scalar_probes()
        } else {
            (0..self.k).map(|c| vec![c as f64]).collect()
        }
    }

    fn conjugate_messages(&self, a: usize, q: &MeanFieldApprox) -> Result<ConjugateMessages> {
        if a < self.k {
            let children = (0..self.data.len())
                .map(|n| {
                    let r = q.mean_stats(self.k + n)?[a];
                    Ok(vec![r * self.data[n] / self.noise_var, r / self.noise_var])
                })
                .collect::<Result<_>>()?;
            Ok(ConjugateMessages { parent: NormalMeanPrior::natural(self.prior_mean, self.prior_var).to_vec(), children })
        } else {
            let means = self.means(q)?;
            let x = self.data[a - self.k];
            let lik = self.label_natural(x, &means);
            let prior = vec![-libm::log(self.k as f64); self.k];
            Ok(ConjugateMessages { parent: prior.clone(), children: vec![lik.iter().zip(&prior).map(|(l, p)| l - p).collect()] })
        }
    }
}

/// Monte Carlo fallback for models that only give `log p̄` pointwise.
/// Expectations average `draws` samples from `q`; partial expectations reuse
/// one fixed set of draws (common random numbers), so they stay exact
/// functions of `x_A` and coordinate updates remain well defined.
pub struct SampledModel<F> {
    log_joint: F,
    n_factors: usize,
    draws: usize,
    streams: Streams,
    probes: Vec<Vec<Vec<f64>>>,
}

impl<F: Fn(&[Vec<f64>]) -> f64> SampledModel<F> {
    /// `probes[a]` as for [`MeanFieldModel::probe_points`]; 10⁴ draws.
    pub fn new(log_joint: F, probes: Vec<Vec<Vec<f64>>>, streams: Streams) -> Self {
        Self { log_joint, n_factors: probes.len(), draws: 10_000, streams, probes }
    }

    pub fn with_draws(mut self, draws: usize) -> Self {
        self.draws = draws;
        self
    }
}

impl<F: Fn(&[Vec<f64>]) -> f64> MeanFieldModel for SampledModel<F> {
    fn n_factors(&self) -> usize {
        self.n_factors
    }

    fn expected_log_joint(&self, q: &MeanFieldApprox) -> Result<Expectation> {
        let mut rng = self.streams.stream(&[0]);
        let vals: Vec<f64> = (0..self.draws).map(|_| (self.log_joint)(&q.sample(&mut rng))).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        Ok(Expectation { value: m, mc_se: Some(libm::sqrt(var / n)) })
    }

    fn partial_expectation(&self, a: usize, x: &[f64], q: &MeanFieldApprox) -> Result<f64> {
        let mut rng = self.streams.stream(&[1, a as u64]);
        let mut acc = 0.0;
        for _ in 0..self.draws {
            let mut s = q.sample(&mut rng);
            s[a] = x.to_vec();
            acc += (self.log_joint)(&s);
        }
        Ok(acc / self.draws as f64)
    }

    fn probe_points(&self, a: usize) -> Vec<Vec<f64>> {
        self.probes[a].clone()
    }
}
