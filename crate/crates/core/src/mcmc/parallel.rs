use alloc::vec;
use alloc::vec::Vec;

use crate::model::FactoredTarget;
use crate::sim::{unhandled, Ctx, Handler, Message, Payload, SimCluster};
use crate::{arg, Error, Result};

/// A partition of data indices `0..N` into shards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    shards: Vec<Vec<usize>>,
}

impl ShardPlan {
    /// Validates that `shards` partition `0..n`; empty shards are allowed.
    pub fn new(shards: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in shards.iter().flatten() {
            if i >= n || seen[i] {
                return Err(arg("shards do not partition the data"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(arg("shards do not cover the data"));
        }
        Ok(Self { shards })
    }

    /// `j` contiguous shards of near-equal size.
    pub fn contiguous(n: usize, j: usize) -> Self {
        let shards = (0..j).map(|s| (s * n / j..(s + 1) * n / j).collect()).collect();
        Self { shards }
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn shard(&self, j: usize) -> &[usize] {
        &self.shards[j]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }
}

fn shard_sum<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64], shard: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &n in shard {
        acc += target.log_lik_term(n, theta);
    }
    acc
}

/// Pairwise reduction, level by level; an odd element is carried up.
fn tree_reduce(mut level: Vec<f64>) -> f64 {
    if level.is_empty() {
        return 0.0;
    }
    while level.len() > 1 {
        level = level.chunks(2).map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] }).collect();
    }
    level[0]
}

/// Serial log-likelihood with per-shard partial sums combined by the fixed
/// pairwise tree used by [`parallel_log_lik`].
pub fn tree_log_lik<T: FactoredTarget + ?Sized>(target: &T, theta: &[f64], plan: &ShardPlan) -> f64 {
    tree_reduce(plan.shards().iter().map(|s| shard_sum(target, theta, s)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum LikMessage {
    Evaluate { shard: usize },
    Partial { shard: usize, value: f64 },
}

impl Payload for LikMessage {
    fn kind(&self) -> &'static str {
        match self {
            LikMessage::Evaluate { .. } => "evaluate",
            LikMessage::Partial { .. } => "partial",
        }
    }
}

struct LikHandler<'a, T: ?Sized> {
    target: &'a T,
    theta: &'a [f64],
    plan: &'a ShardPlan,
    partials: Vec<Option<f64>>,
    master: usize,
}

impl<T: FactoredTarget + ?Sized> Handler<LikMessage> for LikHandler<'_, T> {
    fn handle(&mut self, msg: Message<LikMessage>, ctx: &mut Ctx<'_, LikMessage>) -> Result<()> {
        match msg.payload {
            LikMessage::Evaluate { shard } if ctx.node() != self.master => {
                let idx = self.plan.shard(shard);
                ctx.charge(idx.len() as u64);
                let value = shard_sum(self.target, self.theta, idx);
                ctx.send(self.master, LikMessage::Partial { shard, value });
                Ok(())
            }
            LikMessage::Partial { shard, value } if ctx.node() == self.master => {
                self.partials[shard] = Some(value);
                Ok(())
            }
            _ => Err(unhandled(&msg)),
        }
    }
}

/// Log-likelihood evaluated shard-by-shard on the workers of `cluster`
/// (shard `j` on worker `j mod K`) and reduced by the master in a fixed tree
/// order, so the result equals [`tree_log_lik`] bit for bit.
pub fn parallel_log_lik<T: FactoredTarget + ?Sized>(
    target: &T,
    theta: &[f64],
    plan: &ShardPlan,
    cluster: &mut SimCluster<LikMessage>,
) -> Result<f64> {
    let k = cluster.workers();
    if k == 0 {
        return Err(arg("cluster has no workers"));
    }
    if plan.shards().iter().map(|s| s.len()).sum::<usize>() != target.n_data() {
        return Err(arg("shards do not partition the data"));
    }
    let master = cluster.master();
    for j in 0..plan.len() {
        cluster.inject(master, j % k, LikMessage::Evaluate { shard: j });
    }
    let mut h = LikHandler { target, theta, plan, partials: vec![None; plan.len()], master };
    cluster.run_until_quiescent(&mut h)?;
    let partials = h
        .partials
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Logic("a shard result never arrived".into()))?;
    Ok(tree_reduce(partials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, FnTarget};
    use crate::rng::Streams;
    use crate::sim::LatencyModel;

    fn target() -> impl FactoredTarget {
        FnTarget::new(1, 1001, |_: &[f64]| 0.0, |n, x: &[f64]| -0.5 * (x[0] - (n as f64).sin() * 3.1).powi(2) / 0.7)
    }

    #[test]
    fn single_shard_equals_serial_sum() {
        let t = target();
        let plan = ShardPlan::contiguous(1001, 1);
        let mut c = SimCluster::new(3, LatencyModel::default(), Streams::new(1));
        let v = parallel_log_lik(&t, &[0.4], &plan, &mut c).unwrap();
        assert_eq!(v.to_bits(), log_likelihood(&t, &[0.4]).to_bits());
    }

    #[test]
    fn four_shards_bit_exact_with_fixed_tree() {
        let t = target();
        let plan = ShardPlan::contiguous(1001, 4);
        let mut c = SimCluster::new(4, LatencyModel { message: 7, per_unit: 1 }, Streams::new(1));
        let v = parallel_log_lik(&t, &[-1.3], &plan, &mut c).unwrap();
        assert_eq!(v.to_bits(), tree_log_lik(&t, &[-1.3], &plan).to_bits());
        assert!((v - log_likelihood(&t, &[-1.3])).abs() < 1e-9 * v.abs());
        // Ideal parallel split of 1001 units over 4 workers plus two hops.
        assert_eq!(c.stats().makespan, 251 + 14);
    }

    #[test]
    fn empty_shards_and_invalid_plans() {
        let t = target();
        let mut shards = ShardPlan::contiguous(1001, 3).shards().to_vec();
        shards.insert(1, Vec::new());
        let plan = ShardPlan::new(shards, 1001).unwrap();
        let mut c = SimCluster::new(2, LatencyModel::default(), Streams::new(1));
        let v = parallel_log_lik(&t, &[0.0], &plan, &mut c).unwrap();
        assert_eq!(v.to_bits(), tree_log_lik(&t, &[0.0], &plan).to_bits());
        assert!(ShardPlan::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(ShardPlan::new(vec![vec![0]], 2).is_err());
    }
}
