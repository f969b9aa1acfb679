//! Prefetching Metropolis-Hastings: workers speculatively evaluate future MH
//! decisions along the accept/reject tree so that several chain steps
//! complete per parallel round, while the output stays bit-identical to
//! serial MH.
//!
//! Tree node `k` (a bit string, `1` = accept) stands for the decision at
//! chain step `t + |k|` taken from the state reached by following `k`. Its
//! proposal and uniform come from the stream keyed by that absolute step, so
//! the draws do not depend on which nodes were speculated. Evaluating a node
//! means computing the log joint at its proposal.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::Rng;

use crate::mcmc::{acceptance_log_ratio, Proposal, SampleBuffer};
use crate::model::{log_joint, FactoredTarget};
use crate::rng::Streams;
use crate::sim::{LatencyModel, Payload, SimCluster};
use crate::special::student_t_cdf;
use crate::{arg, Result};

/// Deepest node the tree can address.
pub const MAX_DEPTH: usize = 63;

/// Bit-string node key; ordered lexicographically with prefixes first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NodeKey {
    bits: u64,
    len: u8,
}

impl NodeKey {
    pub const ROOT: NodeKey = NodeKey { bits: 0, len: 0 };

    pub fn depth(&self) -> usize {
        self.len as usize
    }

    /// The `i`-th decision on the path (`true` = accept).
    pub fn bit(&self, i: usize) -> bool {
        self.bits & (1u64 << (63 - i)) != 0
    }

    pub fn child(&self, accept: bool) -> NodeKey {
        debug_assert!(self.depth() < MAX_DEPTH);
        let bits = if accept { self.bits | (1u64 << (63 - self.len as usize)) } else { self.bits };
        NodeKey { bits, len: self.len + 1 }
    }

    /// Drop the first decision (the subtree below that child becomes the tree).
    fn strip_first(&self) -> NodeKey {
        NodeKey { bits: self.bits << 1, len: self.len - 1 }
    }

    pub fn parse(s: &str) -> Result<NodeKey> {
        if s.len() > MAX_DEPTH {
            return Err(arg("node key too long"));
        }
        let mut k = NodeKey::ROOT;
        for c in s.chars() {
            k = match c {
                '0' => k.child(false),
                '1' => k.child(true),
                _ => return Err(arg("node keys are strings of 0 and 1")),
            };
        }
        Ok(k)
    }
}

impl Ord for NodeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.bits, self.len).cmp(&(other.bits, other.len))
    }
}

impl PartialOrd for NodeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{self}\"")
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.depth()).map(|i| if self.bit(i) { '1' } else { '0' }).collect();
        f.write_str(&s)
    }
}

/// Deterministic draws of a node: the state it starts from, its proposal and
/// its uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDraws {
    pub state: Vec<f64>,
    pub proposal: Vec<f64>,
    pub log_u: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Copy)]
pub enum NodeStatus {
    Pending,
    Running,
    Done,
}

#[derive(Clone, Debug)]
struct Node {
    draws: NodeDraws,
    /// Log joint at the proposal, once evaluated.
    value: Option<f64>,
    status: NodeStatus,
}

/// The speculation tree rooted at the current chain state.
#[derive(Clone, Debug)]
pub struct SpecTree {
    streams: Streams,
    chain: u64,
    /// Absolute chain step of the root decision.
    step: u64,
    root: Vec<f64>,
    root_log_joint: f64,
    nodes: BTreeMap<NodeKey, Node>,
}

impl SpecTree {
    pub fn new(streams: Streams, chain: u64, root: Vec<f64>, root_log_joint: f64) -> Self {
        Self { streams, chain, step: 0, root, root_log_joint, nodes: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn root(&self) -> &[f64] {
        &self.root
    }

    /// Evaluated log joint at the node's proposal.
    pub fn value(&self, key: NodeKey) -> Option<f64> {
        self.nodes.get(&key).and_then(|n| n.value)
    }

    pub fn status(&self, key: NodeKey) -> NodeStatus {
        self.nodes.get(&key).map_or(NodeStatus::Pending, |n| n.status)
    }

    /// Draws of node `key`, materialising ancestors as needed.
    pub fn draws<P: Proposal + ?Sized>(&mut self, key: NodeKey, proposal: &P) -> &NodeDraws {
        if !self.nodes.contains_key(&key) {
            let state = if key.depth() == 0 {
                self.root.clone()
            } else {
                let parent = NodeKey { bits: key.bits & !(u64::MAX >> (key.len - 1)), len: key.len - 1 };
                let accepted = key.bit(key.depth() - 1);
                let pd = self.draws(parent, proposal);
                if accepted { pd.proposal.clone() } else { pd.state.clone() }
            };
            let mut rng = self.streams.stream(&[self.chain, self.step + key.depth() as u64]);
            let prop = proposal.sample(&state, &mut rng);
            let u: f64 = rng.random();
            let draws = NodeDraws { state, proposal: prop, log_u: libm::log(u) };
            self.nodes.insert(key, Node { draws, value: None, status: NodeStatus::Pending });
        }
        &self.nodes[&key].draws
    }

    /// Log joint of the state a node starts from, when known.
    fn state_log_joint(&self, key: NodeKey) -> Option<f64> {
        // The state was produced by the deepest accepting ancestor.
        let mut k = key;
        while k.depth() > 0 {
            let parent = NodeKey { bits: k.bits & !(u64::MAX >> (k.len - 1)), len: k.len - 1 };
            if k.bit(k.depth() - 1) {
                return self.value(parent);
            }
            k = parent;
        }
        Some(self.root_log_joint)
    }

    /// The decision at `key` if both log joints it needs are known.
    fn known_decision<P: Proposal + ?Sized>(&self, key: NodeKey, proposal: &P) -> Option<bool> {
        let node = self.nodes.get(&key)?;
        let to = node.value?;
        let from = self.state_log_joint(key)?;
        let log_alpha = acceptance_log_ratio(proposal, &node.draws.state, from, &node.draws.proposal, to);
        Some(node.draws.log_u < log_alpha)
    }

    /// Apply the root decision and re-root at the child taken.
    fn advance<P: Proposal + ?Sized>(&mut self, proposal: &P) -> Option<(bool, Vec<f64>)> {
        let accepted = self.known_decision(NodeKey::ROOT, proposal)?;
        let root = self.nodes.remove(&NodeKey::ROOT).expect("root decision is known");
        if accepted {
            self.root = root.draws.proposal;
            self.root_log_joint = root.value.expect("evaluated");
        }
        let old = core::mem::take(&mut self.nodes);
        self.nodes = old
            .into_iter()
            .filter(|(k, _)| k.bit(0) == accepted)
            .map(|(k, n)| (k.strip_first(), n))
            .collect();
        self.step += 1;
        Some((accepted, self.root.clone()))
    }
}

/// View of a tree node handed to predictors.
#[derive(Clone, Debug)]
pub struct NodeView<'a> {
    pub key: NodeKey,
    pub draws: &'a NodeDraws,
}

/// Predicts the probability that a node's MH test accepts.
pub trait AcceptPredictor {
    fn accept_prob(&self, node: &NodeView<'_>) -> f64;
}

/// A fixed acceptance probability.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub f64);

impl ConstantPredictor {
    /// The asymptotically optimal random-walk acceptance rate.
    pub fn optimal_rate() -> Self {
        ConstantPredictor(0.234)
    }
}

impl AcceptPredictor for ConstantPredictor {
    fn accept_prob(&self, _: &NodeView<'_>) -> f64 {
        self.0
    }
}

/// Knows the true outcome by evaluating the target itself (for
/// benchmarking the best possible schedule).
pub struct OraclePredictor<'a, T: ?Sized, P: ?Sized> {
    pub target: &'a T,
    pub proposal: &'a P,
}

impl<T: FactoredTarget + ?Sized, P: Proposal + ?Sized> AcceptPredictor for OraclePredictor<'_, T, P> {
    fn accept_prob(&self, node: &NodeView<'_>) -> f64 {
        let d = node.draws;
        let from = log_joint(self.target, &d.state).unwrap_or(f64::NEG_INFINITY);
        let to = log_joint(self.target, &d.proposal).unwrap_or(f64::NEG_INFINITY);
        let log_alpha = acceptance_log_ratio(self.proposal, &d.state, from, &d.proposal, to);
        if d.log_u < log_alpha { 1.0 } else { 0.0 }
    }
}

/// Estimates `P(Λ > ψ)` from the first `m` data, modelling the error of the
/// subsample mean with a Student-t distribution.
pub struct SubsamplePredictor<'a, T: ?Sized, P: ?Sized> {
    target: &'a T,
    proposal: &'a P,
    indices: Vec<usize>,
}

impl<'a, T: FactoredTarget + ?Sized, P: Proposal + ?Sized> SubsamplePredictor<'a, T, P> {
    /// Uses a fixed random subset of `m ≥ 2` data drawn from `streams`.
    pub fn new(target: &'a T, proposal: &'a P, m: usize, streams: &Streams) -> Result<Self> {
        let n = target.n_data();
        if m < 2 || m > n {
            return Err(arg("subsample size must lie in [2, N]"));
        }
        let mut rng = streams.stream(&[crate::rng::tag::PERMUTATION]);
        let indices = rand::seq::index::sample(&mut rng, n, m).into_vec();
        Ok(Self { target, proposal, indices })
    }
}

impl<T: FactoredTarget + ?Sized, P: Proposal + ?Sized> AcceptPredictor for SubsamplePredictor<'_, T, P> {
    fn accept_prob(&self, node: &NodeView<'_>) -> f64 {
        let d = node.draws;
        let n = self.target.n_data() as f64;
        let m = self.indices.len() as f64;
        let mut offset = self.target.log_prior(&d.state) - self.target.log_prior(&d.proposal);
        if !self.proposal.is_symmetric() {
            offset += self.proposal.log_density(&d.proposal, &d.state) - self.proposal.log_density(&d.state, &d.proposal);
        }
        let psi = (d.log_u + offset) / n;
        let (mut s1, mut s2) = (0.0, 0.0);
        for &i in &self.indices {
            let l = self.target.log_lik_term(i, &d.proposal) - self.target.log_lik_term(i, &d.state);
            s1 += l;
            s2 += l * l;
        }
        let mean = s1 / m;
        if !mean.is_finite() || !psi.is_finite() {
            return if mean > psi { 1.0 } else { 0.0 };
        }
        let var = (m / (m - 1.0) * (s2 / m - mean * mean)).max(0.0);
        let sigma = libm::sqrt(var / m * ((n - m) / (n - 1.0).max(1.0)).max(0.0));
        if sigma == 0.0 {
            return if mean > psi { 1.0 } else { 0.0 };
        }
        student_t_cdf((mean - psi) / sigma, m - 1.0).clamp(0.0, 1.0)
    }
}

/// Breadth-first frontier: the first `j` unevaluated nodes in level order.
pub fn naive_schedule(tree: &SpecTree, j: usize) -> Vec<NodeKey> {
    let mut out = Vec::with_capacity(j);
    let mut level = alloc::vec![NodeKey::ROOT];
    while out.len() < j && level[0].depth() < MAX_DEPTH {
        for k in &level {
            if out.len() == j {
                break;
            }
            if tree.value(*k).is_none() {
                out.push(*k);
            }
        }
        level = level.iter().flat_map(|k| [k.child(false), k.child(true)]).collect();
    }
    out
}

/// Path probability of every candidate: product of branch probabilities
/// from the root, using exact outcomes where both log joints are known.
struct Candidate {
    prob: f64,
    key: NodeKey,
}

/// The `j` unevaluated nodes with the highest path probability under the
/// predictor (ties by key order). Nodes with path probability below
/// `abort_below` are never scheduled.
pub fn predictive_schedule<P: Proposal + ?Sized>(
    tree: &mut SpecTree,
    j: usize,
    predictor: &dyn AcceptPredictor,
    proposal: &P,
    abort_below: Option<f64>,
) -> Result<Vec<NodeKey>> {
    let mut out = Vec::with_capacity(j);
    let mut frontier = alloc::vec![Candidate { prob: 1.0, key: NodeKey::ROOT }];
    while out.len() < j {
        // Best-first: highest probability, then smallest key.
        let best = frontier
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| b.prob.total_cmp(&a.prob).then(a.key.cmp(&b.key)))
            .map(|(i, _)| i);
        let Some(i) = best else { break };
        let c = frontier.swap_remove(i);
        if abort_below.is_some_and(|t| c.prob < t) {
            break;
        }
        if tree.value(c.key).is_none() {
            out.push(c.key);
        }
        if c.key.depth() + 1 >= MAX_DEPTH {
            continue;
        }
        let p = match tree.known_decision(c.key, proposal) {
            Some(a) => if a { 1.0 } else { 0.0 },
            None => {
                let draws = tree.draws(c.key, proposal).clone();
                let p = predictor.accept_prob(&NodeView { key: c.key, draws: &draws });
                if !(0.0..=1.0).contains(&p) {
                    return Err(arg("predictor returned a probability outside [0, 1]"));
                }
                p
            }
        };
        frontier.push(Candidate { prob: c.prob * p, key: c.key.child(true) });
        frontier.push(Candidate { prob: c.prob * (1.0 - p), key: c.key.child(false) });
    }
    Ok(out)
}

/// Scheduling policy of the master.
pub enum Schedule<'a> {
    Naive,
    Predictive(&'a dyn AcceptPredictor),
}

/// Run configuration.
#[derive(Clone, Copy, Debug)]
pub struct PrefetchConfig {
    /// Number of workers `J`.
    pub workers: usize,
    pub latency: LatencyModel,
    /// Skip nodes whose path probability falls below this (off by default).
    pub abort_below: Option<f64>,
}

impl PrefetchConfig {
    pub fn new(workers: usize) -> Self {
        Self { workers, latency: LatencyModel::default(), abort_below: None }
    }
}

/// Work accounting of a prefetching run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefetchReport {
    pub steps: usize,
    pub supersteps: usize,
    pub evaluations: usize,
    /// Evaluations whose node was discarded.
    pub wasted: usize,
    pub makespan: u64,
    /// Ticks one serial step costs.
    pub step_cost: u64,
}

impl PrefetchReport {
    pub fn steps_per_superstep(&self) -> f64 {
        self.steps as f64 / self.supersteps.max(1) as f64
    }

    /// Serial time for the same steps over simulated parallel time.
    pub fn speedup(&self) -> f64 {
        (self.steps as u64 * self.step_cost) as f64 / self.makespan.max(1) as f64
    }
}

/// Output of [`prefetch_run`].
#[derive(Clone, Debug)]
pub struct PrefetchRun {
    pub draws: SampleBuffer,
    pub report: PrefetchReport,
    /// `(proposal, log u)` of every decision taken, in chain order.
    pub draw_log: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug)]
struct Eval;

impl Payload for Eval {
    fn kind(&self) -> &'static str {
        "evaluate"
    }
}

/// Run `iterations` MH steps with speculative evaluation on a simulated
/// cluster of `cfg.workers` workers. Draws are bit-identical to
/// [`crate::mcmc::run_mh`] with the same streams and chain index.
pub fn prefetch_run<T, P>(
    target: &T,
    proposal: &P,
    init: Vec<f64>,
    iterations: usize,
    schedule: &Schedule<'_>,
    cfg: &PrefetchConfig,
    streams: &Streams,
    chain: u64,
) -> Result<PrefetchRun>
where
    T: FactoredTarget + ?Sized,
    P: Proposal + ?Sized,
{
    if cfg.workers == 0 || cfg.workers > MAX_DEPTH {
        return Err(arg("worker count must lie in [1, 63]"));
    }
    if init.len() != target.dim() {
        return Err(arg("initial state has the wrong dimension"));
    }
    let root_lj = log_joint(target, &init)?;
    let mut tree = SpecTree::new(*streams, chain, init, root_lj);
    let mut cluster: SimCluster<Eval> = SimCluster::new(cfg.workers, cfg.latency, streams.child(chain));
    let cost = target.n_data().max(1) as u64;
    let mut draws = SampleBuffer::with_capacity(target.dim(), iterations);
    let mut draw_log = Vec::with_capacity(iterations);
    let (mut supersteps, mut evaluations, mut used) = (0usize, 0usize, 0usize);

    while draws.len() < iterations {
        let keys = match schedule {
            Schedule::Naive => naive_schedule(&tree, cfg.workers),
            Schedule::Predictive(p) => predictive_schedule(&mut tree, cfg.workers, *p, proposal, cfg.abort_below)?,
        };
        if keys.is_empty() {
            return Err(arg("the schedule selected no work; lower the abort threshold"));
        }
        let jobs: Vec<(NodeKey, Vec<f64>)> =
            keys.iter().map(|k| (*k, tree.draws(*k, proposal).proposal.clone())).collect();
        for (k, _) in &jobs {
            tree.nodes.get_mut(k).expect("materialised").status = NodeStatus::Running;
        }
        cluster.bsp_superstep(
            &mut tree,
            |w, _| {
                Ok(match jobs.get(w) {
                    Some((_, theta)) => (Some(log_joint(target, theta).unwrap_or(f64::NEG_INFINITY)), cost),
                    None => (None, 0),
                })
            },
            |tree, values| {
                for ((k, _), v) in jobs.iter().zip(values) {
                    let node = tree.nodes.get_mut(k).expect("materialised");
                    node.value = v;
                    node.status = NodeStatus::Done;
                }
                Ok(())
            },
        )?;
        supersteps += 1;
        evaluations += jobs.len();
        while draws.len() < iterations {
            let Some(root) = tree.nodes.get(&NodeKey::ROOT) else { break };
            let logged = (root.draws.proposal.clone(), root.draws.log_u);
            let Some((accepted, theta)) = tree.advance(proposal) else { break };
            used += 1;
            draw_log.push(logged);
            draws.push(&theta, accepted);
        }
    }
    let report = PrefetchReport {
        steps: draws.len(),
        supersteps,
        evaluations,
        wasted: evaluations - used,
        makespan: cluster.stats().makespan,
        step_cost: cost * cfg.latency.per_unit,
    };
    Ok(PrefetchRun { draws, report, draw_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::{mh_step, run_mh, ChainState, RandomWalk};
    use alloc::string::ToString;
    use alloc::vec;
    use crate::zoo::GaussianMeanModel;

    fn setup() -> (GaussianMeanModel, RandomWalk, Vec<f64>) {
        let m = GaussianMeanModel::generate(&[0.4, -0.2], 3.0, 1.0, 50, &Streams::new(1));
        let (mean, var) = m.posterior();
        (m, RandomWalk::isotropic(2, 2.0 * var.sqrt()), mean)
    }

    #[test]
    fn key_order_and_parse() {
        let keys: Vec<NodeKey> = ["", "0", "00", "01", "1", "10", "11"].iter().map(|s| NodeKey::parse(s).unwrap()).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(NodeKey::parse("0110").unwrap().to_string(), "0110");
        assert!(NodeKey::parse("012").is_err());
    }

    #[test]
    fn node_draws_are_deterministic_and_match_serial() {
        let (m, q, init) = setup();
        let streams = Streams::new(2);
        let lj = log_joint(&m, &init).unwrap();
        let mut a = SpecTree::new(streams, 0, init.clone(), lj);
        let mut b = SpecTree::new(streams, 0, init.clone(), lj);
        assert_eq!(a.draws(NodeKey::ROOT, &q).state, init);
        let k = NodeKey::parse("1011").unwrap();
        let da = a.draws(k, &q).clone();
        // Materialise in a different order first.
        b.draws(NodeKey::parse("0").unwrap(), &q);
        b.draws(NodeKey::parse("11").unwrap(), &q);
        assert_eq!(b.draws(k, &q), &da);
        // The root node consumes exactly the serial first step's draws.
        let mut s = ChainState::new(&m, init).unwrap();
        let out = mh_step(&m, &q, &mut s, &mut streams.stream(&[0, 0]));
        let root = a.draws(NodeKey::ROOT, &q);
        assert_eq!((root.proposal.clone(), root.log_u), (out.proposal, out.log_u));
    }

    #[test]
    fn naive_schedule_counts() {
        let (m, _, init) = setup();
        let tree = SpecTree::new(Streams::new(3), 0, init.clone(), log_joint(&m, &init).unwrap());
        assert_eq!(naive_schedule(&tree, 1), vec![NodeKey::ROOT]);
        let s = naive_schedule(&tree, 8);
        let depths: Vec<usize> = s.iter().map(|k| k.depth()).collect();
        assert_eq!(depths, vec![0, 1, 1, 2, 2, 2, 2, 3]);
    }

    #[test]
    fn limiting_predictors_pick_single_paths() {
        let (m, q, init) = setup();
        let mut tree = SpecTree::new(Streams::new(4), 0, init.clone(), log_joint(&m, &init).unwrap());
        let rej = predictive_schedule(&mut tree, 5, &ConstantPredictor(0.0), &q, None).unwrap();
        assert_eq!(rej.iter().map(|k| k.to_string()).collect::<Vec<_>>(), ["", "0", "00", "000", "0000"]);
        let acc = predictive_schedule(&mut tree, 4, &ConstantPredictor(1.0), &q, None).unwrap();
        assert_eq!(acc.iter().map(|k| k.to_string()).collect::<Vec<_>>(), ["", "1", "11", "111"]);
        assert!(predictive_schedule(&mut tree, 2, &ConstantPredictor(1.5), &q, None).is_err());
    }

    fn path_prob(k: NodeKey, p: f64) -> f64 {
        (0..k.depth()).map(|i| if k.bit(i) { p } else { 1.0 - p }).product()
    }

    #[test]
    fn predictive_selection_dominates_naive_in_path_probability() {
        let (m, q, init) = setup();
        for p in [0.1, 0.234, 0.5, 0.8] {
            for j in [1, 3, 8, 13] {
                let mut tree = SpecTree::new(Streams::new(5), 0, init.clone(), log_joint(&m, &init).unwrap());
                let pred = predictive_schedule(&mut tree, j, &ConstantPredictor(p), &q, None).unwrap();
                let naive = naive_schedule(&tree, j);
                let a: f64 = pred.iter().map(|k| path_prob(*k, p)).sum();
                let b: f64 = naive.iter().map(|k| path_prob(*k, p)).sum();
                assert!(a >= b - 1e-12, "p={p} j={j}: {a} < {b}");
            }
        }
    }

    #[test]
    fn prefetched_chains_are_bit_exact() {
        let (m, q, init) = setup();
        let streams = Streams::new(6);
        let (serial, _) = run_mh(&m, &q, init.clone(), 2000, &streams, 3).unwrap();
        let constant = ConstantPredictor::optimal_rate();
        let oracle = OraclePredictor { target: &m, proposal: &q };
        let sub = SubsamplePredictor::new(&m, &q, 10, &streams).unwrap();
        let schedules: [Schedule<'_>; 4] =
            [Schedule::Naive, Schedule::Predictive(&constant), Schedule::Predictive(&oracle), Schedule::Predictive(&sub)];
        for sched in &schedules {
            for j in [1, 2, 4, 8] {
                let run = prefetch_run(&m, &q, init.clone(), 2000, sched, &PrefetchConfig::new(j), &streams, 3).unwrap();
                assert_eq!(run.draws, serial);
                if j == 1 {
                    assert_eq!(run.report.supersteps, 2000);
                }
            }
        }
    }

    #[test]
    fn draw_log_matches_serial_draws() {
        let (m, q, init) = setup();
        let streams = Streams::new(7);
        let run = prefetch_run(&m, &q, init.clone(), 300, &Schedule::Naive, &PrefetchConfig::new(4), &streams, 0).unwrap();
        let mut s = ChainState::new(&m, init).unwrap();
        for (t, (prop, log_u)) in run.draw_log.iter().enumerate() {
            let out = mh_step(&m, &q, &mut s, &mut streams.stream(&[0, t as u64]));
            assert_eq!((&out.proposal, out.log_u), (prop, *log_u));
        }
    }

    #[test]
    fn speedup_accounting() {
        let (m, q, init) = setup();
        let streams = Streams::new(8);
        let naive = prefetch_run(&m, &q, init.clone(), 3000, &Schedule::Naive, &PrefetchConfig::new(8), &streams, 0).unwrap();
        assert!(naive.report.steps_per_superstep() >= 3.0);
        let oracle = OraclePredictor { target: &m, proposal: &q };
        let best = prefetch_run(&m, &q, init.clone(), 3000, &Schedule::Predictive(&oracle), &PrefetchConfig::new(8), &streams, 0)
            .unwrap();
        assert_eq!(best.report.steps_per_superstep(), 8.0);
        assert_eq!(best.report.wasted, 0);
        let r = naive.report;
        assert_eq!(r.evaluations, r.supersteps * 8);
        assert_eq!(r.evaluations - r.wasted, r.steps);
        assert!((r.speedup() - r.steps_per_superstep()).abs() < 1e-9);
    }

    #[test]
    fn abort_threshold_limits_speculation() {
        let (m, q, init) = setup();
        let cfg = PrefetchConfig { abort_below: Some(0.5), ..PrefetchConfig::new(8) };
        let p = ConstantPredictor(0.234);
        let run = prefetch_run(&m, &q, init.clone(), 200, &Schedule::Predictive(&p), &cfg, &Streams::new(9), 0).unwrap();
        let (serial, _) = run_mh(&m, &q, init, 200, &Streams::new(9), 0).unwrap();
        assert_eq!(run.draws, serial);
        assert!(run.report.evaluations < run.report.supersteps * 8);
    }
}
