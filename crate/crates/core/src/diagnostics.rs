//! Chain-quality diagnostics and the transient-bias versus Monte Carlo
//! error experiment.
//!
//! R̂ and `n_eff` are the classic between/within-chain heuristics: useful
//! warnings, not proofs of convergence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::mcmc::SampleBuffer;
use crate::{arg, Error, Result};

/// `S` chains of `T` scalar summaries `ψ_ts = f(θ_ts)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSet {
    chains: Vec<Vec<f64>>,
}

impl ChainSet {
    pub fn new(chains: Vec<Vec<f64>>) -> Result<Self> {
        let t = chains.first().map(Vec::len).ok_or_else(|| arg("no chains"))?;
        if t == 0 || chains.iter().any(|c| c.len() != t) {
            return Err(arg("chains must be non-empty and of equal length"));
        }
        Ok(Self { chains })
    }

    pub fn from_buffers(buffers: &[SampleBuffer], f: &dyn Fn(&[f64]) -> f64) -> Result<Self> {
        Self::new(buffers.iter().map(|b| b.rows().map(f).collect()).collect())
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn len(&self) -> usize {
        self.chains[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chain(&self, s: usize) -> &[f64] {
        &self.chains[s]
    }
}

/// Between-chain variance `B`, within-chain variance `W` and the pooled
/// variance estimate `ν = (T-1)/T W + B/T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceComponents {
    pub between: f64,
    pub within: f64,
    pub pooled: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn variance_components(chains: &ChainSet) -> Result<VarianceComponents> {
    let (s, t) = (chains.n_chains(), chains.len());
    if s < 2 || t < 2 {
        return Err(arg("need at least two chains of at least two draws"));
    }
    let means: Vec<f64> = chains.chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let between = t as f64 / (s as f64 - 1.0) * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let within = chains.chains.iter().map(|c| sample_var(c)).sum::<f64>() / s as f64;
    let tf = t as f64;
    Ok(VarianceComponents { between, within, pooled: (tf - 1.0) / tf * within + between / tf })
}

/// Potential scale reduction `R̂ = √(ν/W)`; values below 1.1 are the usual
/// acceptance heuristic.
pub fn rhat(chains: &ChainSet) -> Result<f64> {
    let v = variance_components(chains)?;
    if v.within <= 0.0 {
        return Err(Error::Degenerate("within-chain variance is zero (stuck chains)".into()));
    }
    Ok(libm::sqrt(v.pooled / v.within))
}

/// Effective sample size `S T ν / B`, capped at `S T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSize {
    pub value: f64,
    /// The raw estimate exceeded `S T` (including `B = 0`) and was capped.
    pub capped: bool,
}

pub fn n_eff(chains: &ChainSet) -> Result<EffectiveSize> {
    let v = variance_components(chains)?;
    let cap = (chains.n_chains() * chains.len()) as f64;
    let raw = cap * v.pooled / v.between;
    if v.between > 0.0 && raw <= cap {
        Ok(EffectiveSize { value: raw, capped: false })
    } else {
        Ok(EffectiveSize { value: cap, capped: true })
    }
}

/// Lag-`k` autocovariance with denominator `T`.
fn autocov(x: &[f64], m: f64, k: usize) -> f64 {
    let n = x.len();
    (0..n - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum::<f64>() / n as f64
}

/// CLT variance `σ² = γ_0 + 2 Σ_{t≥1} γ_t` of a stationary segment, with
/// the sum truncated at the first non-positive pair `γ_{2k} + γ_{2k+1}`
/// (initial positive sequence) or at `max_lag`.
pub fn asymptotic_variance(samples: &[f64], max_lag: usize) -> Result<f64> {
    let n = samples.len();
    if n < 4 {
        return Err(arg("need at least four samples"));
    }
    let m = mean(samples);
    let g0 = autocov(samples, m, 0);
    let limit = max_lag.min(n - 2);
    let mut sum = -g0;
    let mut k = 0;
    while 2 * k < limit {
        let pair = autocov(samples, m, 2 * k) + autocov(samples, m, 2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        sum += 2.0 * pair;
        k += 1;
    }
    // An immediately negative first pair still leaves the lag-0 term.
    Ok(if k == 0 { g0 } else { sum })
}

/// Monte Carlo standard error of the sample mean, `√(σ²/T)`.
pub fn mcse(samples: &[f64]) -> Result<f64> {
    Ok(libm::sqrt(asymptotic_variance(samples, samples.len() / 2)? / samples.len() as f64))
}

/// Standard error of the mean from `batches` non-overlapping batch means.
pub fn batch_means_se(samples: &[f64], batches: usize) -> Result<f64> {
    let size = samples.len() / batches.max(1);
    if batches < 2 || size == 0 {
        return Err(arg("need at least two non-empty batches"));
    }
    let means: Vec<f64> = samples.chunks_exact(size).take(batches).map(mean).collect();
    Ok(libm::sqrt(sample_var(&means) / batches as f64))
}

/// Which draws an estimator uses in the error experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorPolicy {
    All,
    LastHalf,
}

impl ErrorPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ErrorPolicy::All => "all",
            ErrorPolicy::LastHalf => "last_half",
        }
    }
}

/// One point of an error curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRow {
    pub n: usize,
    pub policy: ErrorPolicy,
    /// `|mean over runs of the estimate − truth|`.
    pub bias_abs: f64,
    /// Standard deviation of the estimate across runs.
    pub mcse: f64,
    pub total_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurves {
    pub rows: Vec<ErrorRow>,
}

impl ErrorCurves {
    pub fn policy(&self, p: ErrorPolicy) -> impl Iterator<Item = &ErrorRow> {
        self.rows.iter().filter(move |r| r.policy == p)
    }

    /// CSV with header `n,policy,bias_abs,mcse,total_rmse`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,policy,bias_abs,mcse,total_rmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e},{:e},{:e}", r.n, r.policy.name(), r.bias_abs, r.mcse, r.total_rmse);
        }
        s
    }

    /// Least-squares slope of `log mcse` against `log n` over rows with `n ≥ from`.
    pub fn mcse_slope(&self, policy: ErrorPolicy, from: usize) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .policy(policy)
            .filter(|r| r.n >= from && r.mcse > 0.0)
            .map(|r| (libm::log(r.n as f64), libm::log(r.mcse)))
            .collect();
        if pts.len() < 2 {
            return Err(arg("too few points for a slope"));
        }
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        Ok(sxy / sxx)
    }
}

/// Geometric grid of about `points` distinct values in `1..=t`, including `t`.
pub fn log_grid(t: usize, points: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (0..points)
        .map(|i| libm::round(libm::pow(t as f64, i as f64 / (points.max(2) - 1) as f64)) as usize)
        .map(|n| n.clamp(1, t))
        .collect();
    g.dedup();
    g
}

/// Run `runs` independent chains of length `t` (each `run_chain(s)` returns
/// `f(θ_1), …, f(θ_t)`) and measure, at each grid length `n`, the bias and
/// spread of the estimator under both policies. `truth = None` is rejected:
/// the experiment only makes sense on models with a known answer.
pub fn error_decomposition_experiment(
    mut run_chain: impl FnMut(usize) -> Result<Vec<f64>>,
    truth: Option<f64>,
    runs: usize,
    t: usize,
    grid: &[usize],
) -> Result<ErrorCurves> {
    let truth = truth.ok_or_else(|| Error::Unsupported("error decomposition needs the exact expectation".into()))?;
    if runs < 2 || t == 0 || grid.iter().any(|&n| n == 0 || n > t) {
        return Err(arg("need two runs and grid points in 1..=T"));
    }
    let policies = [ErrorPolicy::All, ErrorPolicy::LastHalf];
    // estimates[p][g][s]
    let mut estimates = alloc::vec![alloc::vec![Vec::with_capacity(runs); grid.len()]; 2];
    let mut prefix = Vec::with_capacity(t + 1);
    for s in 0..runs {
        let values = run_chain(s)?;
        if values.len() != t {
            return Err(Error::Logic(format!("run {s} returned {} values, expected {t}", values.len())));
        }
        prefix.clear();
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &values {
            acc += v;
            prefix.push(acc);
        }
        for (g, &n) in grid.iter().enumerate() {
            let from = n - n.div_ceil(2);
            estimates[0][g].push(prefix[n] / n as f64);
            estimates[1][g].push((prefix[n] - prefix[from]) / (n - from) as f64);
        }
    }
    let mut rows = Vec::with_capacity(2 * grid.len());
    for (p, policy) in policies.iter().enumerate() {
        for (g, &n) in grid.iter().enumerate() {
            let e = &estimates[p][g];
            let m = mean(e);
            let mse = e.iter().map(|x| (x - truth) * (x - truth)).sum::<f64>() / e.len() as f64;
            rows.push(ErrorRow {
                n,
                policy: *policy,
                bias_abs: (m - truth).abs(),
                mcse: libm::sqrt(sample_var(e)),
                total_rmse: libm::sqrt(mse),
            });
        }
    }
    Ok(ErrorCurves { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use alloc::vec;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(seed: u64, s: usize, t: usize) -> ChainSet {
        let st = Streams::new(seed);
        ChainSet::new((0..s).map(|k| {
            let mut r = st.stream(&[k as u64]);
            (0..t).map(|_| StandardNormal.sample(&mut r)).collect()
        }).collect()).unwrap()
    }

    fn ar1(rho: f64, x0: f64, t: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut x = x0;
        let scale = (1.0 - rho * rho).sqrt();
        (0..t)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                x = rho * x + scale * e;
                x
            })
            .collect()
    }

    #[test]
    fn rhat_and_neff_small_examples() {
        let c = ChainSet::new(vec![vec![0.0, 2.0], vec![0.0, 2.0]]).unwrap();
        let v = variance_components(&c).unwrap();
        assert_eq!((v.between, v.within, v.pooled), (0.0, 2.0, 1.0));
        assert!((rhat(&c).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let e = n_eff(&c).unwrap();
        assert!(e.capped && e.value == 4.0);

        let stuck = ChainSet::new(vec![vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(rhat(&stuck), Err(Error::Degenerate(_))));
        let v = variance_components(&stuck).unwrap();
        assert_eq!((v.pooled, v.between), (2.0, 4.0));
        assert_eq!(n_eff(&stuck).unwrap(), EffectiveSize { value: 2.0, capped: false });
        assert!(ChainSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(rhat(&ChainSet::new(vec![vec![1.0, 2.0]]).unwrap()).is_err());
    }

    #[test]
    fn iid_chains_pass_the_heuristics() {
        let c = iid(1, 4, 10_000);
        let r = rhat(&c).unwrap();
        assert!(r > 0.99 && r < 1.02 && r < 1.1);
        let e = n_eff(&c).unwrap();
        assert!(e.value >= 0.8 * 40_000.0 && e.value <= 40_000.0, "{e:?}");
    }

    #[test]
    fn rhat_tends_to_one() {
        let devs: Vec<f64> = [100, 1000, 10_000].iter().map(|&t| (rhat(&iid(2, 4, t)).unwrap() - 1.0).abs()).collect();
        assert!(devs[0] > devs[1] && devs[1] > devs[2], "{devs:?}");
    }

    #[test]
    fn separated_modes_flag_nonconvergence() {
        let st = Streams::new(3);
        let chains = [-3.0, 3.0]
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut r = st.stream(&[k as u64]);
                (0..1000).map(|_| m + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect()
            })
            .collect();
        assert!(rhat(&ChainSet::new(chains).unwrap()).unwrap() > 1.5);
    }

    #[test]
    fn asymptotic_variance_of_ar1_chains() {
        let mut rng = Streams::new(4).stream(&[0]);
        let t = 100_000;
        let x: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = sample_var(&x);
        assert!((asymptotic_variance(&x, 1000).unwrap() / var - 1.0).abs() < 0.1);

        let x = ar1(0.5, 0.0, t, &mut rng);
        let var = sample_var(&x);
        assert!((asymptotic_variance(&x, 1000).unwrap() / (3.0 * var) - 1.0).abs() < 0.15);

        let x = ar1(-0.5, 0.0, t, &mut rng);
        let var = sample_var(&x);
        let s = asymptotic_variance(&x, 1000).unwrap();
        assert!(s < var && (s / (var / 3.0) - 1.0).abs() < 0.15, "{s} vs {var}");
    }

    #[test]
    fn batch_means_and_mcse_agree_on_ar1() {
        let mut rng = Streams::new(5).stream(&[0]);
        let x = ar1(0.9, 0.0, 200_000, &mut rng);
        let a = mcse(&x).unwrap();
        let b = batch_means_se(&x, 100).unwrap();
        let exact = (19.0f64 / 200_000.0).sqrt();
        assert!((a / exact - 1.0).abs() < 0.15 && (b / exact - 1.0).abs() < 0.3, "{a} {b} {exact}");
    }

    #[test]
    fn error_decomposition_on_an_ar1_kernel() {
        let st = Streams::new(6);
        let t = 10_000;
        let grid = log_grid(t, 20);
        let curves = error_decomposition_experiment(
            |s| Ok(ar1(0.5, 10.0, t, &mut st.stream(&[s as u64]))),
            Some(0.0),
            4000,
            t,
            &grid,
        )
        .unwrap();
        let slope = curves.mcse_slope(ErrorPolicy::All, 100).unwrap();
        assert!((-0.6..=-0.4).contains(&slope), "{slope}");
        let all: Vec<&ErrorRow> = curves.policy(ErrorPolicy::All).collect();
        let last: Vec<&ErrorRow> = curves.policy(ErrorPolicy::LastHalf).collect();
        for (a, l) in all.iter().zip(&last) {
            if a.n >= 20 {
                assert!(l.bias_abs <= a.bias_abs, "n={} {} > {}", a.n, l.bias_abs, a.bias_abs);
            }
        }
        // Unbiased start: bias drowns in Monte Carlo error.
        let unbiased = error_decomposition_experiment(
            |s| Ok(ar1(0.5, 0.0, t, &mut st.stream(&[1, s as u64]))),
            Some(0.0),
            200,
            t,
            &grid,
        )
        .unwrap();
        let end = unbiased.policy(ErrorPolicy::All).last().unwrap();
        assert!(end.bias_abs < end.mcse);
        let csv = curves.to_csv();
        assert!(csv.starts_with("n,policy,bias_abs,mcse,total_rmse\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * grid.len());
        assert!(matches!(
            error_decomposition_experiment(|_| Ok(vec![0.0]), None, 2, 1, &[1]),
            Err(Error::Unsupported(_))
        ));
    }

    proptest! {
        #[test]
        fn diagnostics_are_pure(seed in 0u64..1000, t in 4usize..50) {
            let a = iid(seed, 3, t);
            let b = iid(seed, 3, t);
            prop_assert_eq!(rhat(&a).unwrap().to_bits(), rhat(&b).unwrap().to_bits());
            prop_assert_eq!(n_eff(&a).unwrap(), n_eff(&b).unwrap());
            let x = a.chain(0);
            prop_assert_eq!(asymptotic_variance(x, 10).unwrap().to_bits(), asymptotic_variance(x, 10).unwrap().to_bits());
        }

        #[test]
        fn neff_never_exceeds_total(seed in 0u64..1000, t in 2usize..30, s in 2usize..5) {
            let e = n_eff(&iid(seed, s, t)).unwrap();
            prop_assert!(e.value > 0.0 && e.value <= (s * t) as f64);
        }
    }
}
