//! `run_experiment`: dispatch a configured algorithm on a dataset and turn
//! its draws into a summary, a diagnostics table and error curves.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use scalebayes_core::consensus::{
    consensus_gaussian_fit, consensus_kde, consensus_weighted, run_subposterior_mh, subposterior_target, Bandwidth,
    ConsensusOptions, SubposteriorDraws,
};
use scalebayes_core::diagnostics::{
    error_decomposition_experiment, log_grid, mcse, n_eff, rhat, ChainSet, ErrorCurves,
};
use scalebayes_core::firefly::{run_flymc, LogisticBound, ScaledBound};
use scalebayes_core::hogwild::{gaussian_stability_check, hogwild_run, HogwildMode, HogwildPlan, QSchedule};
use scalebayes_core::linalg;
use scalebayes_core::mcmc::{run_mh, Proposal, RandomWalk, SampleBuffer, ShardPlan};
use scalebayes_core::model::{ExpFamily, FactoredTarget, GaussianModelSpec, NormalMean, NormalMeanPrior};
use scalebayes_core::prefetch::{
    prefetch_run, ConstantPredictor, OraclePredictor, PrefetchConfig, Schedule, SubsamplePredictor,
};
use scalebayes_core::rng::{tag, Streams};
use scalebayes_core::sgld::{run_sgld, StepSchedule};
use scalebayes_core::sim::{LatencyModel, SimStats, TraceEvent};
use scalebayes_core::subsample::{run_adaptive_mh, CBound, StopRule, StopRuleConfig};
use scalebayes_core::vi::{
    conjugate_factor_update, coordinate_update, mean_field_fit, FitConfig, FitReport, GaussianMixture, GaussianTarget,
    MeanFieldApprox, MeanFieldModel, UpdateRule,
};
use scalebayes_core::vi_scalable::{
    bbvi_gradient, conjugate_svb_update, order_spread, reparam_gradient, svb_run, svi_run, DiagGaussianQ, SviConfig,
    VariationalFamily,
};
use scalebayes_core::weierstrass::{
    augmented_gaussian_marginal, gaussian_factors, weierstrass_run, LocalFactor, WeierstrassConfig,
};
use scalebayes_core::Error as CoreError;
use serde_json::{json, Map, Value};

use crate::config::{
    AlgorithmSpec, BbviParams, CaviParams, Combine, ConsensusParams, Estimator, ExperimentConfig, FireflyParams,
    HogwildModeName, HogwildParams, ModelSpec, PrefetchParams, PrefetchPolicy, RuleKind, RuleName, SubsampleParams,
    SvbParams, SviParams, WeierstrassParams,
};
use crate::dataset::{generate, Dataset, GridProposal, Problem};
use crate::draws;
use crate::error::{HarnessError, Result};
use crate::executor::map_jobs;

/// Number of draws taken from a fitted variational approximation.
pub const VI_DRAWS: usize = 1000;

const UNAVAILABLE: &str = "unavailable";

/// What an algorithm produced for one chain.
struct ChainOutput {
    draws: SampleBuffer,
    /// MCMC kernels report acceptance; optimizers do not.
    has_acceptance: bool,
    /// Likelihood-term evaluations (or data items touched).
    data_touch: Option<f64>,
    sim: Option<(SimStats, Vec<TraceEvent>)>,
    report: Value,
    /// A numeric failure worth reporting (divergence, non-convergence).
    failure: Option<String>,
}

impl ChainOutput {
    fn plain(draws: SampleBuffer) -> Self {
        Self { draws, has_acceptance: false, data_touch: None, sim: None, report: Value::Null, failure: None }
    }
}

/// Everything a run writes.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub chains: Vec<SampleBuffer>,
    pub summary: Value,
    pub diagnostics_csv: String,
    pub error_curves_csv: Option<String>,
    /// Set when the run completed but hit a numeric failure.
    pub failure: Option<String>,
}

/// The dataset named by the config, or a fresh one from `data_seed`.
pub fn load_dataset(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<Dataset> {
    let Some(path) = &cfg.dataset else { return generate(&cfg.model, cfg.data_seed) };
    let path: PathBuf = match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.clone(),
    };
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let ds = Dataset::parse(&text)?;
    if ds.model != cfg.model {
        return Err(HarnessError::schema("/dataset", "dataset was generated from a different model spec"));
    }
    Ok(ds)
}

fn unsupported(alg: &str, model: &ModelSpec) -> HarnessError {
    HarnessError::Usage(format!("algorithm `{alg}` does not support model `{}`", model.kind()))
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    linalg::standard_normal_vec(1, rng)[0]
}

type SyncTarget<'a> = &'a (dyn FactoredTarget + Sync);

fn target_of(problem: &Problem) -> Option<SyncTarget<'_>> {
    match problem {
        Problem::Gaussian(m) => Some(m),
        Problem::Logistic(m) => Some(m),
        Problem::Grid(_, t) => Some(t),
        Problem::Mixture(_) | Problem::System(_) => None,
    }
}

/// Targets with a continuous parameter, for gradient-based algorithms.
fn continuous_target_of(problem: &Problem) -> Option<SyncTarget<'_>> {
    match problem {
        Problem::Grid(..) => None,
        _ => target_of(problem),
    }
}

/// Random walk, except on a discrete grid where the chain moves between
/// neighbouring points.
fn proposal_for(problem: &Problem, dim: usize, scale: f64) -> Box<dyn Proposal + Sync> {
    match problem {
        Problem::Grid(spec, _) => Box::new(GridProposal { grid: spec.grid.clone() }),
        _ => Box::new(RandomWalk::isotropic(dim, scale)),
    }
}

/// Dispersed starting points: the prior scale for Gaussian models, a small
/// ball around the mode for logistic regression.
struct Inits {
    center: Vec<f64>,
    spread: f64,
    streams: Streams,
    grid: Option<GridProposal>,
}

impl Inits {
    fn new(problem: &Problem, streams: &Streams) -> Result<Self> {
        let (center, spread) = match problem {
            Problem::Gaussian(m) => (vec![0.0; m.dim()], m.prior_var().sqrt()),
            Problem::Logistic(m) => (m.map_estimate()?, 0.1),
            Problem::Grid(spec, _) => {
                let mid = spec.grid.iter().sum::<f64>() / spec.grid.len() as f64;
                (vec![mid], 0.5)
            }
            Problem::Mixture(_) | Problem::System(_) => (Vec::new(), 0.0),
        };
        let grid = match problem {
            Problem::Grid(spec, _) => Some(GridProposal { grid: spec.grid.clone() }),
            _ => None,
        };
        Ok(Self { center, spread, streams: streams.child(tag::INIT), grid })
    }

    fn at(&self, chain: usize) -> Vec<f64> {
        let mut rng = self.streams.stream(&[chain as u64]);
        let x: Vec<f64> = self.center.iter().map(|c| c + self.spread * gauss(&mut rng)).collect();
        match &self.grid {
            Some(g) => vec![g.grid[g.index(x[0])]],
            None => x,
        }
    }
}

fn sim_value(stats: &SimStats) -> Value {
    json!({
        "makespan": stats.makespan,
        "work_ticks": stats.work_ticks,
        "messages": stats.messages,
        "speedup": stats.speedup(),
    })
}

/// Messages exchanged directly between workers (master excluded).
pub fn inter_worker_messages(trace: &[TraceEvent], workers: usize) -> usize {
    trace.iter().filter(|e| e.src < workers && e.dst < workers && e.src != e.dst).count()
}

fn draws_from_gaussians(means: &[f64], vars: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<SampleBuffer> {
    let d = means.len();
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n {
        for i in 0..d {
            rows.push(means[i] + vars[i].sqrt() * gauss(rng));
        }
    }
    Ok(SampleBuffer::from_rows(d, rows)?)
}

/// Run the configured algorithm and summarize.
pub fn execute(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunArtifacts> {
    let problem = ds.problem()?;
    let streams = Streams::new(cfg.seed);
    let inits = Inits::new(&problem, &streams)?;
    let outputs = map_jobs(cfg.chains, |k| run_chain(cfg, &problem, &streams, &inits, k))?;
    let failure = outputs.iter().find_map(|o| o.failure.clone());
    let warmup = summary_warmup(cfg);
    let summary = summarize(cfg, ds, &outputs, warmup)?;
    let chains: Vec<SampleBuffer> = outputs.into_iter().map(|o| o.draws).collect();
    let kept: Vec<SampleBuffer> = chains.iter().map(|c| c.tail(warmup)).collect();
    let diagnostics_csv = diagnostics_table(&kept)?;
    let error_curves_csv = match (&ds.oracle, chains.len() >= 2 && chains[0].len() >= 2) {
        (Some(o), true) => Some(error_curves(&chains, o.posterior_mean[0])?.to_csv()),
        _ => None,
    };
    Ok(RunArtifacts { chains, summary, diagnostics_csv, error_curves_csv, failure })
}

/// Rows per output chain left out of summaries. Consensus drops warm-up from
/// each shard before combining, so its combined draws are kept whole.
fn summary_warmup(cfg: &ExperimentConfig) -> usize {
    match cfg.algorithm {
        AlgorithmSpec::Consensus(_) => 0,
        _ => cfg.warmup_rows(),
    }
}

/// Error curves of the first coordinate, one run per chain.
pub fn error_curves(chains: &[SampleBuffer], truth: f64) -> Result<ErrorCurves> {
    let t = chains[0].len();
    Ok(error_decomposition_experiment(|s| Ok(chains[s].column(0)), Some(truth), chains.len(), t, &log_grid(t, 20))?)
}

pub fn write_artifacts(dir: &Path, art: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    draws::write(dir, "draws", &art.chains)?;
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&art.summary).unwrap_or_default() + "\n";
    fs::write(&summary, text).map_err(|e| HarnessError::io(&summary, e))?;
    let diag = dir.join("diagnostics.csv");
    fs::write(&diag, &art.diagnostics_csv).map_err(|e| HarnessError::io(&diag, e))?;
    if let Some(csv) = &art.error_curves_csv {
        let p = dir.join("error_curves.csv");
        fs::write(&p, csv).map_err(|e| HarnessError::io(&p, e))?;
    }
    Ok(())
}

fn run_chain(cfg: &ExperimentConfig, problem: &Problem, streams: &Streams, inits: &Inits, k: usize) -> Result<ChainOutput> {
    let alg = &cfg.algorithm;
    let chain_streams = streams.child(k as u64);
    let iters = cfg.iterations;
    match alg {
        AlgorithmSpec::Mh(p) => {
            let t = target_of(problem).ok_or_else(|| unsupported(alg.id(), &cfg.model))?;
            let q = proposal_for(problem, t.dim(), p.scale);
            let (draws, _) = run_mh(t, q.as_ref(), inits.at(k), iters, streams, k as u64)?;
            Ok(ChainOutput {
                has_acceptance: true,
                data_touch: Some(((iters + 1) * t.n_data()) as f64),
                ..ChainOutput::plain(draws)
            })
        }
        AlgorithmSpec::SubsampleMh(p) => subsample(cfg, p, problem, streams, inits, k),
        AlgorithmSpec::Firefly(p) => firefly(cfg, p, problem, streams, inits, k),
        AlgorithmSpec::Sgld(p) => {
            let t = continuous_target_of(problem).ok_or_else(|| unsupported(alg.id(), &cfg.model))?;
            let sched = StepSchedule::new(p.alpha, p.beta, p.gamma)?;
            let run = run_sgld(t, inits.at(k), iters, p.batch, &sched, streams, k as u64)?;
            let half = iters / 2;
            let weighted: Vec<f64> = (0..t.dim()).map(|i| run.weighted_mean(half, |x| x[i])).collect();
            Ok(ChainOutput {
                data_touch: Some((iters * p.batch.min(t.n_data())) as f64),
                report: json!({ "step_weighted_mean_last_half": weighted, "final_step_size": run.step_sizes.last() }),
                ..ChainOutput::plain(run.draws)
            })
        }
        AlgorithmSpec::Prefetch(p) => prefetch(cfg, p, problem, streams, inits, k),
        AlgorithmSpec::Consensus(p) => consensus(cfg, p, problem, &chain_streams, inits, k),
        AlgorithmSpec::Weierstrass(p) => weierstrass(cfg, p, problem, &chain_streams),
        AlgorithmSpec::Hogwild(p) => hogwild(cfg, p, problem, &chain_streams),
        AlgorithmSpec::Cavi(p) => cavi(cfg, p, problem, &chain_streams),
        AlgorithmSpec::Svi(p) => svi(cfg, p, problem, &chain_streams),
        AlgorithmSpec::Bbvi(p) => bbvi(cfg, p, problem, &chain_streams, inits, k),
        AlgorithmSpec::Svb(p) => svb(cfg, p, problem, &chain_streams),
    }
}

fn subsample(
    cfg: &ExperimentConfig,
    p: &SubsampleParams,
    problem: &Problem,
    streams: &Streams,
    inits: &Inits,
    k: usize,
) -> Result<ChainOutput> {
    let t = target_of(problem).ok_or_else(|| unsupported(cfg.algorithm.id(), &cfg.model))?;
    let rule = match p.rule {
        RuleName::TTest => StopRule::TTest,
        RuleName::Hoeffding => StopRule::Hoeffding,
        RuleName::Bernstein => StopRule::Bernstein,
    };
    // Logistic log-likelihood terms are |x_n|-Lipschitz in θ.
    let c_bound = match problem {
        Problem::Logistic(m) => CBound::Lipschitz(m.max_feature_norm()),
        _ => CBound::pilot(),
    };
    let rule_cfg =
        StopRuleConfig { batch: p.batch, epsilon: p.epsilon, rule, p: p.p, gamma: p.gamma, c_bound, per_batch_delta: false };
    let q = proposal_for(problem, t.dim(), p.scale);
    let run = run_adaptive_mh(t, q.as_ref(), inits.at(k), cfg.iterations, &rule_cfg, streams, k as u64, p.audit)?;
    let mean_used = run.mean_data_used();
    let report = if p.audit {
        json!({ "mean_data_used": mean_used, "disagreements": run.disagreements, "audited_steps": cfg.iterations })
    } else {
        json!({ "mean_data_used": mean_used, "disagreements": UNAVAILABLE })
    };
    Ok(ChainOutput {
        has_acceptance: true,
        data_touch: Some(run.data_used.iter().sum::<usize>() as f64),
        report,
        ..ChainOutput::plain(run.draws)
    })
}

fn firefly(
    cfg: &ExperimentConfig,
    p: &FireflyParams,
    problem: &Problem,
    streams: &Streams,
    inits: &Inits,
    k: usize,
) -> Result<ChainOutput> {
    let run = match problem {
        Problem::Gaussian(m) => {
            let b = ScaledBound::new(m, p.delta)?;
            let q = RandomWalk::isotropic(m.dim(), p.scale);
            run_flymc(m, &b, &q, inits.at(k), cfg.iterations, p.fraction, streams, k as u64)?
        }
        Problem::Logistic(m) => {
            let b = LogisticBound::new(m, &inits.center)?;
            let q = RandomWalk::isotropic(m.dim(), p.scale);
            run_flymc(m, &b, &q, inits.at(k), cfg.iterations, p.fraction, streams, k as u64)?
        }
        _ => return Err(unsupported(cfg.algorithm.id(), &cfg.model)),
    };
    let evals: u64 = run.lik_evals.iter().sum();
    let bright = run.bright_counts.iter().sum::<usize>() as f64 / run.bright_counts.len().max(1) as f64;
    Ok(ChainOutput {
        has_acceptance: true,
        data_touch: Some(evals as f64),
        report: json!({ "mean_bright": bright }),
        ..ChainOutput::plain(run.draws)
    })
}

fn prefetch(
    cfg: &ExperimentConfig,
    p: &PrefetchParams,
    problem: &Problem,
    streams: &Streams,
    inits: &Inits,
    k: usize,
) -> Result<ChainOutput> {
    let t = target_of(problem).ok_or_else(|| unsupported(cfg.algorithm.id(), &cfg.model))?;
    let q = proposal_for(problem, t.dim(), p.scale);
    let q = q.as_ref();
    let constant = ConstantPredictor(p.rate);
    let oracle = OraclePredictor { target: t, proposal: q };
    let sub;
    let schedule = match p.policy {
        PrefetchPolicy::Naive => Schedule::Naive,
        PrefetchPolicy::Constant => Schedule::Predictive(&constant),
        PrefetchPolicy::Oracle => Schedule::Predictive(&oracle),
        PrefetchPolicy::Subsample => {
            sub = SubsamplePredictor::new(t, q, p.pilot, streams)?;
            Schedule::Predictive(&sub)
        }
    };
    let run = prefetch_run(t, q, inits.at(k), cfg.iterations, &schedule, &PrefetchConfig::new(cfg.workers), streams, k as u64)?;
    let r = run.report;
    Ok(ChainOutput {
        has_acceptance: true,
        data_touch: Some((r.evaluations * t.n_data()) as f64),
        sim: None,
        report: json!({
            "steps": r.steps,
            "supersteps": r.supersteps,
            "evaluations": r.evaluations,
            "wasted": r.wasted,
            "makespan": r.makespan,
            "steps_per_superstep": r.steps_per_superstep(),
            "speedup": r.speedup(),
        }),
        ..ChainOutput::plain(run.draws)
    })
}

fn prior_cov(problem: &Problem) -> Option<DMatrix<f64>> {
    match problem {
        Problem::Gaussian(m) => Some(DMatrix::identity(m.dim(), m.dim()) * m.prior_var()),
        Problem::Logistic(m) => Some(DMatrix::identity(m.dim(), m.dim()) * m.prior_var()),
        _ => None,
    }
}

fn consensus(
    cfg: &ExperimentConfig,
    p: &ConsensusParams,
    problem: &Problem,
    streams: &Streams,
    inits: &Inits,
    k: usize,
) -> Result<ChainOutput> {
    let t = target_of(problem).ok_or_else(|| unsupported(cfg.algorithm.id(), &cfg.model))?;
    let prior = prior_cov(problem).ok_or_else(|| unsupported(cfg.algorithm.id(), &cfg.model))?;
    let plan = ShardPlan::contiguous(t.n_data(), cfg.workers);
    let q = RandomWalk::isotropic(t.dim(), p.scale);
    let run = run_subposterior_mh(t, &plan, &q, &inits.at(k), cfg.iterations, streams, LatencyModel::default())?;
    let w = cfg.warmup_rows();
    let kept = SubposteriorDraws::new((0..cfg.workers).map(|j| run.draws.shard(j).tail(w)).collect())?;
    let rows = kept.draws_per_shard();
    let mut rng = streams.child(tag::AGGREGATE).stream(&[0]);
    let draws = match p.combine {
        Combine::Weighted => {
            consensus_weighted(&kept, &prior, ConsensusOptions { diagonal: p.diagonal, ..Default::default() })?
        }
        Combine::GaussianFit => consensus_gaussian_fit(&kept)?.sample(rows, &mut rng),
        Combine::Kde => consensus_kde(&kept, Bandwidth::Scott, rows, &mut rng)?.samples,
    };
    let shard_acceptance: Vec<f64> = (0..cfg.workers).map(|j| run.draws.shard(j).acceptance_rate()).collect();
    Ok(ChainOutput {
        data_touch: Some(((cfg.iterations + 1) * t.n_data()) as f64),
        report: json!({
            "shards": cfg.workers,
            "shard_acceptance": shard_acceptance,
            "inter_worker_messages_before_aggregation": inter_worker_messages(&run.trace, cfg.workers),
        }),
        sim: Some((run.stats, run.trace)),
        ..ChainOutput::plain(draws)
    })
}

/// The Gaussian mean model as per-shard sufficient statistics.
pub fn gaussian_shard_spec(m: &scalebayes_core::zoo::GaussianMeanModel, shards: usize) -> Result<GaussianModelSpec> {
    let d = m.dim();
    let plan = ShardPlan::contiguous(m.n_data(), shards);
    let mut covs = Vec::with_capacity(shards);
    let mut obs = Vec::with_capacity(shards);
    for j in 0..shards {
        let idx = plan.shard(j);
        if idx.is_empty() {
            return Err(HarnessError::Usage(format!("shard {j} is empty; use fewer workers")));
        }
        let mut mean = DVector::zeros(d);
        for &n in idx {
            mean += DVector::from_column_slice(m.datum(n));
        }
        mean /= idx.len() as f64;
        covs.push(DMatrix::identity(d, d) * (m.noise_var() / idx.len() as f64));
        obs.push(mean);
    }
    Ok(GaussianModelSpec::new(DMatrix::identity(d, d) * m.prior_var(), covs, obs)?)
}

fn weierstrass(cfg: &ExperimentConfig, p: &WeierstrassParams, problem: &Problem, streams: &Streams) -> Result<ChainOutput> {
    let mut wcfg = WeierstrassConfig::new(Vec::new());
    wcfg.sync_every = p.sync_every;
    let (run, report) = match problem {
        Problem::Gaussian(m) => {
            let spec = gaussian_shard_spec(m, cfg.workers)?;
            let factors = gaussian_factors(&spec)?;
            wcfg.h = vec![p.h; m.dim()];
            let run = weierstrass_run(&factors, vec![0.0; m.dim()], &wcfg, cfg.iterations, streams, LatencyModel::default())?;
            let report = if m.dim() == 1 {
                let (means, vars): (Vec<f64>, Vec<f64>) = (0..cfg.workers)
                    .map(|j| spec.subposterior(j).map(|(mu, c)| (mu[0], c[(0, 0)])))
                    .collect::<std::result::Result<Vec<_>, _>>()?
                    .into_iter()
                    .unzip();
                let (am, av) = augmented_gaussian_marginal(&means, &vars, p.h)?;
                json!({ "augmented_oracle_mean": am, "augmented_oracle_var": av })
            } else {
                json!({ "augmented_oracle_mean": UNAVAILABLE, "augmented_oracle_var": UNAVAILABLE })
            };
            (run, report)
        }
        Problem::Logistic(m) => {
            let plan = ShardPlan::contiguous(m.n_data(), cfg.workers);
            let subs = (0..cfg.workers).map(|j| subposterior_target(m, &plan, j)).collect::<std::result::Result<Vec<_>, _>>()?;
            let factors: Vec<LocalFactor<'_>> = subs.iter().map(|s| LocalFactor::Density(s)).collect();
            wcfg.h = vec![p.h; m.dim()];
            let init = m.map_estimate()?;
            let run = weierstrass_run(&factors, init, &wcfg, cfg.iterations, streams, LatencyModel::default())?;
            (run, json!({}))
        }
        _ => return Err(unsupported(cfg.algorithm.id(), &cfg.model)),
    };
    Ok(ChainOutput { report, sim: Some((run.stats, run.trace)), ..ChainOutput::plain(run.draws) })
}

fn hogwild(cfg: &ExperimentConfig, p: &HogwildParams, problem: &Problem, streams: &Streams) -> Result<ChainOutput> {
    let Problem::System(s) = problem else { return Err(unsupported(cfg.algorithm.id(), &cfg.model)) };
    let n = s.precision().nrows();
    let blocks = p.blocks.clone().unwrap_or_else(|| (0..n).map(|i| vec![i]).collect());
    let mode = match p.mode {
        HogwildModeName::Bsp => HogwildMode::Bsp,
        HogwildModeName::Async => HogwildMode::Async { peers: p.peers },
        HogwildModeName::Colored => HogwildMode::Colored { workers: cfg.workers },
    };
    let plan = HogwildPlan::new(blocks, n, QSchedule::Constant(p.q), mode)?.with_divergence_limit(p.divergence_limit);
    let stability = match gaussian_stability_check(s, &plan) {
        Ok(r) => json!({ "stable": r.stable, "spectral_radius": r.spectral_radius, "diag_dominant": r.diag_dominant }),
        Err(CoreError::Unsupported(_)) => Value::String(UNAVAILABLE.into()),
        Err(e) => return Err(e.into()),
    };
    let run = hogwild_run(s, &plan, &vec![0.0; n], cfg.iterations, streams, LatencyModel::default())?;
    let failure = run.diverged_at.map(|t| format!("state diverged at row {t}"));
    Ok(ChainOutput {
        report: json!({ "stability": stability, "diverged_at": run.diverged_at }),
        sim: Some((run.stats, run.trace)),
        failure,
        ..ChainOutput::plain(run.draws)
    })
}

fn fit_report(r: &FitReport) -> Value {
    json!({
        "elbo_initial": r.elbo.first(),
        "elbo_final": r.elbo.last(),
        "sweeps": r.elbo.len() - 1,
        "converged": r.converged,
        "max_decrease": r.max_decrease,
    })
}

/// Component means at evenly spaced data quantiles.
fn quantile_means(data: &[f64], k: usize) -> Vec<f64> {
    let mut x = data.to_vec();
    x.sort_by(f64::total_cmp);
    (0..k).map(|c| x[((c as f64 + 0.5) / k as f64 * x.len() as f64) as usize % x.len()]).collect()
}

fn update(q: &mut MeanFieldApprox, a: usize, model: &dyn MeanFieldModel, rule: RuleKind) -> Result<()> {
    match rule {
        RuleKind::Generic => coordinate_update(q, a, model)?,
        RuleKind::Conjugate => conjugate_factor_update(q, a, model)?,
    }
    Ok(())
}

fn cavi(cfg: &ExperimentConfig, p: &CaviParams, problem: &Problem, streams: &Streams) -> Result<ChainOutput> {
    let rule = match p.rule {
        RuleKind::Generic => UpdateRule::Generic,
        RuleKind::Conjugate => UpdateRule::Conjugate,
    };
    let fit_cfg = FitConfig { rule, tol: p.tol, max_sweeps: cfg.iterations };
    let mut rng = streams.child(tag::NOISE).stream(&[0]);
    let (means, vars, report) = match problem {
        Problem::Mixture(m) => {
            let mut q = m.approx(&quantile_means(&m.data, m.k))?;
            // Labels first: with uniform responsibilities every mean update
            // would collapse onto the grand mean.
            for a in m.k..m.n_factors() {
                update(&mut q, a, m, p.rule)?;
            }
            let r = mean_field_fit(m, &mut q, fit_cfg)?;
            let (mut mu, mut var) = (Vec::new(), Vec::new());
            for c in 0..m.k {
                let (a, b) = NormalMeanPrior::moments(q.factor(c).eta());
                mu.push(a);
                var.push(b);
            }
            (mu, var, fit_report(&r))
        }
        Problem::System(s) => {
            let n = s.precision().nrows();
            let t = GaussianTarget::new(s.precision().clone(), s.potential().clone())?;
            let mut q = t.approx(&vec![0.0; n], &vec![1.0; n])?;
            let r = mean_field_fit(&t, &mut q, fit_cfg)?;
            let (mut mu, mut var) = (Vec::new(), Vec::new());
            for a in 0..n {
                let eta = q.factor(a).eta();
                let v = -0.5 / eta[1];
                mu.push(eta[0] * v);
                var.push(v);
            }
            (mu, var, fit_report(&r))
        }
        _ => return Err(unsupported(cfg.algorithm.id(), &cfg.model)),
    };
    let failure = (report["converged"] == Value::Bool(false)).then(|| "coordinate ascent did not converge".to_string());
    let draws = draws_from_gaussians(&means, &vars, VI_DRAWS, &mut rng)?;
    Ok(ChainOutput {
        report: json!({ "fit": report, "q_mean": means, "q_var": vars }),
        failure,
        ..ChainOutput::plain(draws)
    })
}

fn svi(cfg: &ExperimentConfig, p: &SviParams, problem: &Problem, streams: &Streams) -> Result<ChainOutput> {
    let Problem::Mixture(m) = problem else { return Err(unsupported(cfg.algorithm.id(), &cfg.model)) };
    let m: &GaussianMixture = m;
    let sched = StepSchedule::new(p.alpha, p.beta, p.gamma)?;
    let svi_cfg = SviConfig::uniform(m.data.len(), p.batches, sched)?;
    let init: Vec<f64> =
        quantile_means(&m.data, m.k).iter().flat_map(|c| NormalMeanPrior::natural(*c, m.prior_var)).collect();
    let run = svi_run(m, init, &svi_cfg, cfg.iterations as u64, streams)?;
    let (mut mu, mut var) = (Vec::new(), Vec::new());
    for c in 0..m.k {
        let (a, b) = NormalMeanPrior::moments(&run.eta[2 * c..2 * c + 2]);
        mu.push(a);
        var.push(b);
    }
    let draws = draws_from_gaussians(&mu, &var, VI_DRAWS, &mut streams.child(tag::NOISE).stream(&[0]))?;
    let per_step = (m.data.len() / p.batches).max(1);
    Ok(ChainOutput {
        data_touch: Some((cfg.iterations * per_step) as f64),
        report: json!({ "eta": run.eta, "halvings": run.halvings, "q_mean": mu, "q_var": var }),
        ..ChainOutput::plain(draws)
    })
}

fn bbvi(
    cfg: &ExperimentConfig,
    p: &BbviParams,
    problem: &Problem,
    streams: &Streams,
    inits: &Inits,
    k: usize,
) -> Result<ChainOutput> {
    let t = continuous_target_of(problem).ok_or_else(|| unsupported(cfg.algorithm.id(), &cfg.model))?;
    let q = DiagGaussianQ { dim: t.dim() };
    let sched = StepSchedule::new(p.alpha, p.beta, p.gamma)?;
    let mut params = inits.at(k);
    params.extend(std::iter::repeat_n(0.0, t.dim()));
    for step in 0..cfg.iterations as u64 {
        let mut rng = streams.stream(&[step]);
        let g = match p.estimator {
            Estimator::Score => bbvi_gradient(&q, &params, t, p.samples, None, &mut rng)?,
            Estimator::Reparam => reparam_gradient(&q, &params, t, p.samples, &mut rng)?,
        };
        let e = sched.step_size(step);
        params.iter_mut().zip(&g.grad).for_each(|(x, d)| *x += e * d);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric(format!("variational parameters diverged at step {step}")).into());
        }
    }
    let mut rng = streams.child(tag::NOISE).stream(&[0]);
    let mut rows = Vec::with_capacity(VI_DRAWS * t.dim());
    for _ in 0..VI_DRAWS {
        rows.extend(q.sample(&params, &mut rng));
    }
    Ok(ChainOutput {
        data_touch: Some((cfg.iterations * p.samples * t.n_data()) as f64),
        report: json!({ "params": params, "entropy": q.entropy(&params) }),
        ..ChainOutput::plain(SampleBuffer::from_rows(t.dim(), rows)?)
    })
}

fn svb(cfg: &ExperimentConfig, p: &SvbParams, problem: &Problem, streams: &Streams) -> Result<ChainOutput> {
    let Problem::Gaussian(m) = problem else { return Err(unsupported(cfg.algorithm.id(), &cfg.model)) };
    if m.dim() != 1 {
        return Err(HarnessError::Usage("svb supports scalar gaussian models".into()));
    }
    let pair = NormalMean { noise_var: m.noise_var() };
    let plan = ShardPlan::contiguous(m.n_data(), p.batches);
    let batches: Vec<Vec<Vec<f64>>> =
        (0..p.batches).map(|j| plan.shard(j).iter().map(|&n| m.datum(n).to_vec()).collect()).collect();
    let alg = conjugate_svb_update(&pair);
    let wrapped = |d: &[Vec<f64>], e: &[f64], _: &mut dyn RngCore| alg(d, e);
    let dom = |e: &[f64]| NormalMeanPrior.in_domain(e);
    let prior = NormalMeanPrior::natural(0.0, m.prior_var()).to_vec();
    let mut finals = Vec::with_capacity(p.orders);
    let mut last = None;
    for order in 0..p.orders as u64 {
        let run = svb_run(prior.clone(), &batches, &wrapped, &dom, cfg.workers, LatencyModel::default(), order, streams)?;
        finals.push(run.eta.clone());
        last = Some(run);
    }
    let run = last.ok_or_else(|| HarnessError::Usage("svb needs at least one order".into()))?;
    let (mu, var) = NormalMeanPrior::moments(&run.eta);
    let draws = draws_from_gaussians(&[mu], &[var], VI_DRAWS, &mut streams.child(tag::NOISE).stream(&[0]))?;
    Ok(ChainOutput {
        data_touch: Some(m.n_data() as f64),
        report: json!({ "eta": run.eta, "order_spread": order_spread(&finals), "orders": p.orders }),
        sim: Some((run.stats, run.trace)),
        ..ChainOutput::plain(draws)
    })
}

fn per_dim<F: Fn(usize) -> std::result::Result<f64, CoreError>>(d: usize, f: F) -> Value {
    let vals: std::result::Result<Vec<f64>, _> = (0..d).map(f).collect();
    match vals {
        Ok(v) => json!(v),
        Err(_) => Value::String(UNAVAILABLE.into()),
    }
}

struct Moments {
    mean: Vec<f64>,
    var: Vec<f64>,
    mcse: Vec<f64>,
}

fn moments(chains: &[SampleBuffer]) -> Result<Moments> {
    let d = chains[0].dim();
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.as_slice().iter().copied()).collect();
    let mean = linalg::to_vec(&linalg::sample_mean(&pooled, d));
    let rows = pooled.len() / d.max(1);
    let var = (0..d)
        .map(|i| pooled.iter().skip(i).step_by(d).map(|x| (x - mean[i]).powi(2)).sum::<f64>() / (rows.max(2) - 1) as f64)
        .collect();
    let s = chains.len() as f64;
    let mcse = (0..d)
        .map(|i| {
            let sq: f64 = chains.iter().map(|c| mcse(&c.column(i)).map_or(f64::NAN, |v| v * v)).sum();
            sq.sqrt() / s
        })
        .collect();
    Ok(Moments { mean, var, mcse })
}

fn summarize(cfg: &ExperimentConfig, ds: &Dataset, outputs: &[ChainOutput], warmup: usize) -> Result<Value> {
    let chains: Vec<SampleBuffer> = outputs.iter().map(|o| o.draws.tail(warmup)).collect();
    let d = chains[0].dim();
    let mut s = Map::new();
    s.insert("schema".into(), "scalebayes.summary/1".into());
    s.insert("algorithm".into(), cfg.algorithm.id().into());
    s.insert("model".into(), cfg.model.kind().into());
    s.insert("seed".into(), cfg.seed.into());
    s.insert("data_seed".into(), ds.seed.into());
    s.insert("chains".into(), chains.len().into());
    s.insert("rows_per_chain".into(), outputs[0].draws.len().into());
    s.insert("warmup".into(), warmup.into());
    s.insert("dim".into(), d.into());
    let mom = moments(&chains)?;
    s.insert("moments".into(), json!({ "mean": mom.mean, "var": mom.var, "mcse": mom.mcse }));
    let set = |i: usize| ChainSet::from_buffers(&chains, &move |x: &[f64]| x[i]);
    let rh = if chains.len() >= 2 { per_dim(d, |i| rhat(&set(i)?)) } else { Value::String(UNAVAILABLE.into()) };
    s.insert("rhat".into(), rh);
    s.insert("n_eff".into(), per_dim(d, |i| n_eff(&set(i)?).map(|e| e.value)));
    let acc = if outputs.iter().all(|o| o.has_acceptance) {
        json!(chains.iter().map(SampleBuffer::acceptance_rate).sum::<f64>() / chains.len() as f64)
    } else {
        Value::String(UNAVAILABLE.into())
    };
    s.insert("acceptance_rate".into(), acc);
    let touch = match outputs.iter().map(|o| o.data_touch).collect::<Option<Vec<f64>>>() {
        Some(v) => {
            let total: f64 = v.iter().sum();
            let per_iter = total / (v.len() * cfg.iterations) as f64;
            json!({ "likelihood_terms_total": total, "per_iteration": per_iter })
        }
        None => Value::String(UNAVAILABLE.into()),
    };
    s.insert("data_touch".into(), touch);
    let sim = match outputs[0].sim.as_ref() {
        Some((stats, _)) => sim_value(stats),
        None => Value::String(UNAVAILABLE.into()),
    };
    s.insert("simulator".into(), sim);
    s.insert("oracle".into(), oracle_metrics(ds, &mom, d));
    s.insert("algorithm_report".into(), Value::Array(outputs.iter().map(|o| o.report.clone()).collect()));
    if let Some(f) = outputs.iter().find_map(|o| o.failure.clone()) {
        s.insert("failure".into(), f.into());
    }
    Ok(Value::Object(s))
}

fn oracle_metrics(ds: &Dataset, mom: &Moments, d: usize) -> Value {
    match &ds.oracle {
        Some(o) if o.posterior_mean.len() == d => {
            let err: Vec<f64> = (0..d).map(|i| (mom.mean[i] - o.posterior_mean[i]).abs()).collect();
            let z: Vec<f64> = (0..d).map(|i| err[i] / mom.mcse[i]).collect();
            let ratio: Vec<f64> = (0..d).map(|i| mom.var[i] / o.posterior_cov[i][i]).collect();
            json!({ "mean_error": err, "mean_error_over_mcse": z, "var_ratio": ratio })
        }
        _ => json!({ "mean_error": UNAVAILABLE, "mean_error_over_mcse": UNAVAILABLE, "var_ratio": UNAVAILABLE }),
    }
}

fn fmt_opt(v: std::result::Result<f64, CoreError>) -> String {
    match v {
        Ok(x) => format!("{x}"),
        Err(_) => UNAVAILABLE.into(),
    }
}

/// One row per coordinate: pooled moments and convergence diagnostics.
pub fn diagnostics_table(chains: &[SampleBuffer]) -> Result<String> {
    let d = chains[0].dim();
    let mom = moments(chains)?;
    let mut out = String::from("dim,mean,var,mcse,rhat,n_eff\n");
    for i in 0..d {
        let set = ChainSet::from_buffers(chains, &move |x: &[f64]| x[i]);
        let rh = if chains.len() >= 2 { fmt_opt(set.clone().and_then(|s| rhat(&s))) } else { UNAVAILABLE.into() };
        let ne = fmt_opt(set.and_then(|s| n_eff(&s).map(|e| e.value)));
        out.push_str(&format!("{i},{},{},{},{rh},{ne}\n", mom.mean[i], mom.var[i], mom.mcse[i]));
    }
    Ok(out)
}

/// Moment errors of a finished run against a dataset's analytic posterior.
pub fn compare(summary: &Value, ds: &Dataset) -> Result<Value> {
    let Some(oracle) = &ds.oracle else {
        return Ok(json!({ "schema": "scalebayes.compare/1", "oracle": UNAVAILABLE }));
    };
    let get = |key: &str| -> Result<Vec<f64>> {
        summary["moments"][key]
            .as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| HarnessError::schema(format!("/moments/{key}"), "expected an array of numbers"))
    };
    let (mean, var, se) = (get("mean")?, get("var")?, get("mcse")?);
    if mean.len() != oracle.posterior_mean.len() {
        return Err(HarnessError::schema("/dim", "summary and dataset dimensions differ"));
    }
    let rows: Vec<Value> = (0..mean.len())
        .map(|i| {
            let exact_var = oracle.posterior_cov[i][i];
            json!({
                "dim": i,
                "mean": mean[i],
                "oracle_mean": oracle.posterior_mean[i],
                "mean_error": (mean[i] - oracle.posterior_mean[i]).abs(),
                "mean_error_over_mcse": (mean[i] - oracle.posterior_mean[i]).abs() / se[i],
                "var": var[i],
                "oracle_var": exact_var,
                "var_ratio": var[i] / exact_var,
            })
        })
        .collect();
    Ok(json!({ "schema": "scalebayes.compare/1", "coordinates": rows }))
}
