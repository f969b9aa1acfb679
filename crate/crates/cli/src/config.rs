//! Experiment configuration: versioned JSON documents with strict keys.
//!
//! `model` and `algorithm` are tagged objects (`kind` and `id`); each variant
//! has its own parameter struct that rejects unknown keys. Every error names
//! the offending value by JSON pointer.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{HarnessError, Result};

pub const EXPERIMENT_SCHEMA: &str = "scalebayes.experiment/1";
pub const ACCEPTANCE_SCHEMA: &str = "scalebayes.acceptance/1";

/// Deserialize `value` as `T`, reporting failures as a pointer under `base`.
pub fn from_value<T: DeserializeOwned>(value: &Value, base: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut pointer = String::from(base);
        for seg in e.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                Segment::Map { key } | Segment::Enum { variant: key } => {
                    pointer.push('/');
                    pointer.push_str(&key.replace('~', "~0").replace('/', "~1"));
                }
                Segment::Unknown => {}
            }
        }
        if pointer.is_empty() {
            pointer.push('/');
        }
        HarnessError::schema(pointer, e.into_inner().to_string())
    })
}

/// Parse JSON text into a `Value`, mapping syntax errors to the root pointer.
pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| HarnessError::schema("/", e.to_string()))
}

fn check_schema(doc: &Value, want: &str) -> Result<()> {
    match doc.get("schema") {
        Some(Value::String(s)) if s == want => Ok(()),
        Some(Value::String(s)) => Err(HarnessError::schema("/schema", format!("unsupported schema `{s}`, expected `{want}`"))),
        Some(_) => Err(HarnessError::schema("/schema", "must be a string")),
        None => Err(HarnessError::schema("/schema", format!("missing field `schema` (expected `{want}`)"))),
    }
}

/// Split a tagged object into its tag and the remaining parameters.
fn split_tag<'a>(value: &'a Value, tag: &str, base: &str) -> Result<(&'a str, Value)> {
    let obj = value.as_object().ok_or_else(|| HarnessError::schema(base, "must be an object"))?;
    let id = match obj.get(tag) {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(HarnessError::schema(format!("{base}/{tag}"), "must be a string")),
        None => return Err(HarnessError::schema(format!("{base}/{tag}"), format!("missing field `{tag}`"))),
    };
    let mut rest = obj.clone();
    rest.remove(tag);
    Ok((id, Value::Object(rest)))
}

fn tagged<T: Serialize>(tag: &str, id: &str, params: &T) -> Value {
    let mut map = match serde_json::to_value(params) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    };
    map.insert(tag.into(), Value::String(id.into()));
    Value::Object(map)
}

fn positive(x: f64, pointer: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::schema(pointer, format!("must be positive and finite, got {x}")))
    }
}

fn nonzero(n: usize, pointer: &str) -> Result<()> {
    if n > 0 {
        Ok(())
    } else {
        Err(HarnessError::schema(pointer, "must be at least 1"))
    }
}

fn finite_all(xs: &[f64], pointer: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(HarnessError::schema(format!("{pointer}/{i}"), "must be finite")),
        None => Ok(()),
    }
}

/// Gaussian mean model: `x_n ~ N(θ, noise_var I)`, `θ ~ N(0, prior_var I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub truth: Vec<f64>,
    pub n: usize,
    pub prior_var: f64,
    pub noise_var: f64,
}

/// Bayesian logistic regression with standard-normal features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSpec {
    pub truth: Vec<f64>,
    pub n: usize,
    #[serde(default = "one")]
    pub feature_scale: f64,
    #[serde(default = "ten")]
    pub prior_var: f64,
}

/// Equal-weight scalar Gaussian mixture with discrete labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub means: Vec<f64>,
    pub n: usize,
    pub noise_var: f64,
    #[serde(default)]
    pub prior_mean: f64,
    #[serde(default = "hundred")]
    pub prior_var: f64,
}

/// Location on a finite grid with a flat prior and Gaussian observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub grid: Vec<f64>,
    pub truth: f64,
    pub n: usize,
    pub noise_var: f64,
}

/// `p(x) ∝ exp(−½ xᵀJx + hᵀx)`, sampled site by site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub precision: Vec<Vec<f64>>,
    pub potential: Vec<f64>,
}

fn one() -> f64 {
    1.0
}
fn ten() -> f64 {
    10.0
}
fn hundred() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Gaussian(GaussianSpec),
    LogisticRegression(LogisticSpec),
    DiscreteMixture(MixtureSpec),
    DiscreteGrid(GridSpec),
    GaussianSystem(SystemSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Gaussian(_) => "gaussian",
            ModelSpec::LogisticRegression(_) => "logistic_regression",
            ModelSpec::DiscreteMixture(_) => "discrete_mixture",
            ModelSpec::DiscreteGrid(_) => "discrete_grid",
            ModelSpec::GaussianSystem(_) => "gaussian_system",
        }
    }

    pub fn parse(value: &Value, base: &str) -> Result<Self> {
        let (kind, rest) = split_tag(value, "kind", base)?;
        let spec = match kind {
            "gaussian" => ModelSpec::Gaussian(from_value(&rest, base)?),
            "logistic_regression" => ModelSpec::LogisticRegression(from_value(&rest, base)?),
            "discrete_mixture" => ModelSpec::DiscreteMixture(from_value(&rest, base)?),
            "discrete_grid" => ModelSpec::DiscreteGrid(from_value(&rest, base)?),
            "gaussian_system" => ModelSpec::GaussianSystem(from_value(&rest, base)?),
            other => {
                return Err(HarnessError::schema(
                    format!("{base}/kind"),
                    format!(
                        "unknown model kind `{other}`, expected one of gaussian, logistic_regression, \
                         discrete_mixture, discrete_grid, gaussian_system"
                    ),
                ))
            }
        };
        spec.validate(base)?;
        Ok(spec)
    }

    pub fn to_value(&self) -> Value {
        match self {
            ModelSpec::Gaussian(s) => tagged("kind", self.kind(), s),
            ModelSpec::LogisticRegression(s) => tagged("kind", self.kind(), s),
            ModelSpec::DiscreteMixture(s) => tagged("kind", self.kind(), s),
            ModelSpec::DiscreteGrid(s) => tagged("kind", self.kind(), s),
            ModelSpec::GaussianSystem(s) => tagged("kind", self.kind(), s),
        }
    }

    fn validate(&self, base: &str) -> Result<()> {
        let p = |f: &str| format!("{base}/{f}");
        match self {
            ModelSpec::Gaussian(s) => {
                nonzero(s.truth.len(), &p("truth"))?;
                finite_all(&s.truth, &p("truth"))?;
                nonzero(s.n, &p("n"))?;
                positive(s.prior_var, &p("prior_var"))?;
                positive(s.noise_var, &p("noise_var"))
            }
            ModelSpec::LogisticRegression(s) => {
                nonzero(s.truth.len(), &p("truth"))?;
                finite_all(&s.truth, &p("truth"))?;
                nonzero(s.n, &p("n"))?;
                positive(s.feature_scale, &p("feature_scale"))?;
                positive(s.prior_var, &p("prior_var"))
            }
            ModelSpec::DiscreteMixture(s) => {
                if s.means.len() < 2 {
                    return Err(HarnessError::schema(p("means"), "need at least two components"));
                }
                finite_all(&s.means, &p("means"))?;
                nonzero(s.n, &p("n"))?;
                positive(s.noise_var, &p("noise_var"))?;
                positive(s.prior_var, &p("prior_var"))
            }
            ModelSpec::DiscreteGrid(s) => {
                if s.grid.len() < 2 {
                    return Err(HarnessError::schema(p("grid"), "need at least two grid points"));
                }
                finite_all(&s.grid, &p("grid"))?;
                nonzero(s.n, &p("n"))?;
                positive(s.noise_var, &p("noise_var"))
            }
            ModelSpec::GaussianSystem(s) => {
                let n = s.potential.len();
                nonzero(n, &p("potential"))?;
                if s.precision.len() != n {
                    return Err(HarnessError::schema(p("precision"), format!("must have {n} rows")));
                }
                for (i, row) in s.precision.iter().enumerate() {
                    if row.len() != n {
                        return Err(HarnessError::schema(format!("{base}/precision/{i}"), format!("must have {n} entries")));
                    }
                    finite_all(row, &format!("{base}/precision/{i}"))?;
                }
                finite_all(&s.potential, &p("potential"))
            }
        }
    }
}

/// Stopping rule of the adaptive subsampling test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    TTest,
    Hoeffding,
    Bernstein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhParams {
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleParams {
    pub scale: f64,
    pub rule: RuleName,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "two")]
    pub gamma: f64,
    /// Also run the exact test at every step and count disagreements.
    #[serde(default)]
    pub audit: bool,
}

fn default_epsilon() -> f64 {
    0.01
}
fn default_batch() -> usize {
    100
}
fn two() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FireflyParams {
    pub scale: f64,
    /// Fraction of indicators resampled per step.
    #[serde(default = "tenth")]
    pub fraction: f64,
    /// Looseness of the scaled Gaussian bound (ignored for logistic models).
    #[serde(default = "tenth")]
    pub delta: f64,
}

fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchPolicy {
    Naive,
    Constant,
    Oracle,
    Subsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefetchParams {
    pub scale: f64,
    pub policy: PrefetchPolicy,
    /// Predicted acceptance rate of the constant policy.
    #[serde(default = "optimal_rate")]
    pub rate: f64,
    /// Subsample size of the subsample predictor.
    #[serde(default = "default_batch")]
    pub pilot: usize,
}

fn optimal_rate() -> f64 {
    0.234
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Weighted,
    GaussianFit,
    Kde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusParams {
    pub scale: f64,
    pub combine: Combine,
    #[serde(default)]
    pub diagonal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeierstrassParams {
    pub h: f64,
    #[serde(default = "one_usize")]
    pub sync_every: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HogwildModeName {
    Bsp,
    Async,
    Colored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HogwildParams {
    #[serde(default = "one_usize")]
    pub q: usize,
    #[serde(default = "bsp")]
    pub mode: HogwildModeName,
    /// Defaults to one block per site.
    #[serde(default)]
    pub blocks: Option<Vec<Vec<usize>>>,
    #[serde(default = "one_usize")]
    pub peers: usize,
    #[serde(default = "default_limit")]
    pub divergence_limit: f64,
}

fn bsp() -> HogwildModeName {
    HogwildModeName::Bsp
}
fn default_limit() -> f64 {
    1e6
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Generic,
    Conjugate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaviParams {
    #[serde(default = "generic")]
    pub rule: RuleKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn generic() -> RuleKind {
    RuleKind::Generic
}
fn default_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SviParams {
    pub batches: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Score,
    Reparam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BbviParams {
    pub estimator: Estimator,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

fn default_samples() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvbParams {
    pub batches: usize,
    /// Number of random delivery orders to run.
    #[serde(default = "one_usize")]
    pub orders: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlgorithmSpec {
    Mh(MhParams),
    SubsampleMh(SubsampleParams),
    Firefly(FireflyParams),
    Sgld(SgldParams),
    Prefetch(PrefetchParams),
    Consensus(ConsensusParams),
    Weierstrass(WeierstrassParams),
    Hogwild(HogwildParams),
    Cavi(CaviParams),
    Svi(SviParams),
    Bbvi(BbviParams),
    Svb(SvbParams),
}

pub const ALGORITHM_IDS: [&str; 12] =
    ["mh", "subsample_mh", "firefly", "sgld", "prefetch", "consensus", "weierstrass", "hogwild", "cavi", "svi", "bbvi", "svb"];

impl AlgorithmSpec {
    pub fn id(&self) -> &'static str {
        match self {
            AlgorithmSpec::Mh(_) => "mh",
            AlgorithmSpec::SubsampleMh(_) => "subsample_mh",
            AlgorithmSpec::Firefly(_) => "firefly",
            AlgorithmSpec::Sgld(_) => "sgld",
            AlgorithmSpec::Prefetch(_) => "prefetch",
            AlgorithmSpec::Consensus(_) => "consensus",
            AlgorithmSpec::Weierstrass(_) => "weierstrass",
            AlgorithmSpec::Hogwild(_) => "hogwild",
            AlgorithmSpec::Cavi(_) => "cavi",
            AlgorithmSpec::Svi(_) => "svi",
            AlgorithmSpec::Bbvi(_) => "bbvi",
            AlgorithmSpec::Svb(_) => "svb",
        }
    }

    /// Whether the draws form a Markov chain started away from stationarity.
    pub fn is_markov_chain(&self) -> bool {
        !matches!(self, AlgorithmSpec::Cavi(_) | AlgorithmSpec::Svi(_) | AlgorithmSpec::Bbvi(_) | AlgorithmSpec::Svb(_))
    }

    pub fn parse(value: &Value, base: &str) -> Result<Self> {
        let (id, rest) = split_tag(value, "id", base)?;
        let spec = match id {
            "mh" => AlgorithmSpec::Mh(from_value(&rest, base)?),
            "subsample_mh" => AlgorithmSpec::SubsampleMh(from_value(&rest, base)?),
            "firefly" => AlgorithmSpec::Firefly(from_value(&rest, base)?),
            "sgld" => AlgorithmSpec::Sgld(from_value(&rest, base)?),
            "prefetch" => AlgorithmSpec::Prefetch(from_value(&rest, base)?),
            "consensus" => AlgorithmSpec::Consensus(from_value(&rest, base)?),
            "weierstrass" => AlgorithmSpec::Weierstrass(from_value(&rest, base)?),
            "hogwild" => AlgorithmSpec::Hogwild(from_value(&rest, base)?),
            "cavi" => AlgorithmSpec::Cavi(from_value(&rest, base)?),
            "svi" => AlgorithmSpec::Svi(from_value(&rest, base)?),
            "bbvi" => AlgorithmSpec::Bbvi(from_value(&rest, base)?),
            "svb" => AlgorithmSpec::Svb(from_value(&rest, base)?),
            other => {
                return Err(HarnessError::schema(
                    format!("{base}/id"),
                    format!("unknown algorithm `{other}`, expected one of {}", ALGORITHM_IDS.join(", ")),
                ))
            }
        };
        spec.validate(base)?;
        Ok(spec)
    }

    pub fn to_value(&self) -> Value {
        let id = self.id();
        match self {
            AlgorithmSpec::Mh(p) => tagged("id", id, p),
            AlgorithmSpec::SubsampleMh(p) => tagged("id", id, p),
            AlgorithmSpec::Firefly(p) => tagged("id", id, p),
            AlgorithmSpec::Sgld(p) => tagged("id", id, p),
            AlgorithmSpec::Prefetch(p) => tagged("id", id, p),
            AlgorithmSpec::Consensus(p) => tagged("id", id, p),
            AlgorithmSpec::Weierstrass(p) => tagged("id", id, p),
            AlgorithmSpec::Hogwild(p) => tagged("id", id, p),
            AlgorithmSpec::Cavi(p) => tagged("id", id, p),
            AlgorithmSpec::Svi(p) => tagged("id", id, p),
            AlgorithmSpec::Bbvi(p) => tagged("id", id, p),
            AlgorithmSpec::Svb(p) => tagged("id", id, p),
        }
    }

    fn validate(&self, base: &str) -> Result<()> {
        let p = |f: &str| format!("{base}/{f}");
        match self {
            AlgorithmSpec::Mh(a) => positive(a.scale, &p("scale")),
            AlgorithmSpec::SubsampleMh(a) => {
                positive(a.scale, &p("scale"))?;
                if !(a.epsilon > 0.0 && a.epsilon < 1.0) {
                    return Err(HarnessError::schema(p("epsilon"), "must lie in (0, 1)"));
                }
                nonzero(a.batch, &p("batch"))
            }
            AlgorithmSpec::Firefly(a) => {
                positive(a.scale, &p("scale"))?;
                if !(a.fraction > 0.0 && a.fraction <= 1.0) {
                    return Err(HarnessError::schema(p("fraction"), "must lie in (0, 1]"));
                }
                Ok(())
            }
            AlgorithmSpec::Sgld(a) => nonzero(a.batch, &p("batch")),
            AlgorithmSpec::Prefetch(a) => positive(a.scale, &p("scale")),
            AlgorithmSpec::Consensus(a) => positive(a.scale, &p("scale")),
            AlgorithmSpec::Weierstrass(a) => {
                positive(a.h, &p("h"))?;
                nonzero(a.sync_every, &p("sync_every"))
            }
            AlgorithmSpec::Hogwild(a) => nonzero(a.q, &p("q")),
            AlgorithmSpec::Cavi(a) => positive(a.tol, &p("tol")),
            AlgorithmSpec::Svi(a) => nonzero(a.batches, &p("batches")),
            AlgorithmSpec::Bbvi(a) => nonzero(a.samples, &p("samples")),
            AlgorithmSpec::Svb(a) => {
                nonzero(a.batches, &p("batches"))?;
                nonzero(a.orders, &p("orders"))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[allow(dead_code)]
    schema: String,
    model: Value,
    data_seed: u64,
    seed: u64,
    algorithm: Value,
    #[serde(default = "one_usize")]
    chains: usize,
    #[serde(default = "one_usize")]
    workers: usize,
    iterations: usize,
    #[serde(default)]
    warmup: Option<usize>,
    #[serde(default)]
    dataset: Option<PathBuf>,
    #[serde(default)]
    out: Option<PathBuf>,
}

/// A validated experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data_seed: u64,
    pub seed: u64,
    pub algorithm: AlgorithmSpec,
    pub chains: usize,
    pub workers: usize,
    pub iterations: usize,
    /// Leading rows per chain left out of summaries; `None` picks a default
    /// per algorithm (see [`ExperimentConfig::warmup_rows`]).
    pub warmup: Option<usize>,
    /// Dataset file to load instead of regenerating from `data_seed`.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_value(doc: &Value) -> Result<Self> {
        check_schema(doc, EXPERIMENT_SCHEMA)?;
        let raw: RawExperiment = from_value(doc, "")?;
        nonzero(raw.chains, "/chains")?;
        nonzero(raw.workers, "/workers")?;
        nonzero(raw.iterations, "/iterations")?;
        if raw.warmup.is_some_and(|w| w >= raw.iterations) {
            return Err(HarnessError::schema("/warmup", "warmup must be smaller than iterations"));
        }
        Ok(Self {
            model: ModelSpec::parse(&raw.model, "/model")?,
            data_seed: raw.data_seed,
            seed: raw.seed,
            algorithm: AlgorithmSpec::parse(&raw.algorithm, "/algorithm")?,
            chains: raw.chains,
            workers: raw.workers,
            iterations: raw.iterations,
            warmup: raw.warmup,
            dataset: raw.dataset,
            out: raw.out,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_value(&parse_json(text)?)
    }

    /// Iterations discarded before summarizing. Markov chains drop their
    /// first half by default; variational methods emit independent draws
    /// from the fitted approximation and drop nothing.
    pub fn warmup_rows(&self) -> usize {
        self.warmup.unwrap_or(if self.algorithm.is_markov_chain() { self.iterations / 2 } else { 0 })
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("schema".into(), EXPERIMENT_SCHEMA.into());
        m.insert("model".into(), self.model.to_value());
        m.insert("data_seed".into(), self.data_seed.into());
        m.insert("seed".into(), self.seed.into());
        m.insert("algorithm".into(), self.algorithm.to_value());
        m.insert("chains".into(), self.chains.into());
        m.insert("workers".into(), self.workers.into());
        m.insert("iterations".into(), self.iterations.into());
        if let Some(w) = self.warmup {
            m.insert("warmup".into(), w.into());
        }
        if let Some(d) = &self.dataset {
            m.insert("dataset".into(), d.display().to_string().into());
        }
        if let Some(o) = &self.out {
            m.insert("out".into(), o.display().to_string().into());
        }
        Value::Object(m)
    }
}

/// One acceptance experiment as a checked-in, runnable document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub schema: String,
    pub criterion: u8,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl AcceptanceConfig {
    pub fn from_value(doc: &Value) -> Result<Self> {
        check_schema(doc, ACCEPTANCE_SCHEMA)?;
        let cfg: Self = from_value(doc, "")?;
        if !(1..=crate::experiments::CRITERIA).contains(&(cfg.criterion as usize)) {
            return Err(HarnessError::schema("/criterion", format!("must lie in 1..={}", crate::experiments::CRITERIA)));
        }
        Ok(cfg)
    }
}

/// A parsed configuration of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyConfig {
    Experiment(ExperimentConfig),
    Acceptance(AcceptanceConfig),
}

impl AnyConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = parse_json(text)?;
        match doc.get("schema").and_then(Value::as_str) {
            Some(ACCEPTANCE_SCHEMA) => Ok(AnyConfig::Acceptance(AcceptanceConfig::from_value(&doc)?)),
            _ => Ok(AnyConfig::Experiment(ExperimentConfig::from_value(&doc)?)),
        }
    }
}
