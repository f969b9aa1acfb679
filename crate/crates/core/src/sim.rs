//! Deterministic discrete-event simulation of a cluster.
//!
//! Nodes `0..K` are workers and node `K` is the master. Time is measured in
//! abstract ticks: handlers charge work units (one unit is typically one
//! likelihood-term evaluation) and every message between distinct nodes pays
//! a fixed latency. Events are processed in `(deliver time, sequence)` order,
//! so a run is a pure function of its configuration and seeds.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use crate::rng::{StreamRng, Streams};
use crate::{Error, Result};

pub type NodeId = usize;

/// Cost model: ticks per message hop and per unit of work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatencyModel {
    pub message: u64,
    pub per_unit: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { message: 0, per_unit: 1 }
    }
}

/// Message payloads report a stable type name for the trace.
pub trait Payload {
    fn kind(&self) -> &'static str;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message<P> {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: P,
    pub send_time: u64,
    pub deliver_time: u64,
}

/// One processed delivery.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub time: u64,
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: &'static str,
}

struct Pending<P> {
    time: u64,
    seq: u64,
    msg: Message<P>,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Handler-side view of the cluster while processing one message.
pub struct Ctx<'a, P> {
    node: NodeId,
    start: u64,
    clock: u64,
    latency: LatencyModel,
    streams: &'a Streams,
    outbox: Vec<(NodeId, P, u64)>,
    units: u64,
}

impl<P> Ctx<'_, P> {
    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Time at which this message started being processed.
    pub fn now(&self) -> u64 {
        self.start
    }

    /// The node's local clock, advanced by charged work.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Charge `units` of work to this node.
    pub fn charge(&mut self, units: u64) {
        self.units += units;
        self.clock += units * self.latency.per_unit;
    }

    /// Send at the current local clock. Messages to self are delivered
    /// without latency.
    pub fn send(&mut self, dst: NodeId, payload: P) {
        self.outbox.push((dst, payload, self.clock));
    }

    /// The node's own stream for `key`.
    pub fn rng(&self, key: &[u64]) -> StreamRng {
        let mut full = Vec::with_capacity(key.len() + 1);
        full.push(self.node as u64);
        full.extend_from_slice(key);
        self.streams.stream(&full)
    }
}

/// Reacts to deliveries. Unknown message kinds should be reported with
/// [`unhandled`].
pub trait Handler<P> {
    fn handle(&mut self, msg: Message<P>, ctx: &mut Ctx<'_, P>) -> Result<()>;
}

/// The error for a message kind a handler does not understand.
pub fn unhandled<P: Payload>(msg: &Message<P>) -> Error {
    Error::Logic(format!("node {} cannot handle message kind {}", msg.dst, msg.payload.kind()))
}

/// Simulated wall-clock accounting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimStats {
    pub makespan: u64,
    /// Total ticks of work summed over nodes (the serial cost).
    pub work_ticks: u64,
    pub messages: usize,
}

impl SimStats {
    /// Serial work over elapsed virtual time.
    pub fn speedup(&self) -> f64 {
        if self.makespan == 0 {
            return 0.0;
        }
        self.work_ticks as f64 / self.makespan as f64
    }
}

pub struct SimCluster<P> {
    workers: usize,
    latency: LatencyModel,
    streams: Streams,
    queue: BinaryHeap<Reverse<Pending<P>>>,
    next_seq: u64,
    now: u64,
    busy_until: Vec<u64>,
    work: Vec<u64>,
    trace: Vec<TraceEvent>,
    step_limit: usize,
    processed: usize,
}

impl<P: Payload> SimCluster<P> {
    pub fn new(workers: usize, latency: LatencyModel, streams: Streams) -> Self {
        Self {
            workers,
            latency,
            streams,
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            busy_until: vec![0; workers + 1],
            work: vec![0; workers + 1],
            trace: Vec::new(),
            step_limit: 10_000_000,
            processed: 0,
        }
    }

    pub fn with_step_limit(mut self, limit: usize) -> Self {
        self.step_limit = limit;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn master(&self) -> NodeId {
        self.workers
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn stats(&self) -> SimStats {
        let makespan = self.busy_until.iter().copied().fold(self.now, u64::max);
        SimStats {
            makespan,
            work_ticks: self.work.iter().sum::<u64>() * self.latency.per_unit,
            messages: self.trace.len(),
        }
    }

    /// Work units charged to `node` so far.
    pub fn node_work(&self, node: NodeId) -> u64 {
        self.work[node]
    }

    fn push(&mut self, msg: Message<P>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Pending { time: msg.deliver_time, seq, msg }));
    }

    /// Queue a message sent by `src` at the current time.
    pub fn inject(&mut self, src: NodeId, dst: NodeId, payload: P) {
        let hop = if src == dst { 0 } else { self.latency.message };
        let send_time = self.now.max(self.busy_until[src]);
        self.push(Message { src, dst, payload, send_time, deliver_time: send_time + hop });
    }

    /// Process deliveries until the queue drains.
    pub fn run_until_quiescent<H: Handler<P> + ?Sized>(&mut self, handler: &mut H) -> Result<&[TraceEvent]> {
        while let Some(Reverse(p)) = self.queue.pop() {
            let dst = p.msg.dst;
            if self.busy_until[dst] > p.time {
                // The node is still working; retry when it is free.
                let time = self.busy_until[dst];
                self.queue.push(Reverse(Pending { time, seq: p.seq, msg: p.msg }));
                continue;
            }
            if self.processed >= self.step_limit {
                self.queue.push(Reverse(p));
                return Err(Error::Timeout { limit: self.step_limit });
            }
            self.processed += 1;
            self.now = p.time;
            self.trace.push(TraceEvent {
                time: p.time,
                seq: p.seq,
                src: p.msg.src,
                dst,
                kind: p.msg.payload.kind(),
            });
            let mut ctx = Ctx {
                node: dst,
                start: p.time,
                clock: p.time,
                latency: self.latency,
                streams: &self.streams,
                outbox: Vec::new(),
                units: 0,
            };
            handler.handle(p.msg, &mut ctx)?;
            let Ctx { clock, outbox, units, .. } = ctx;
            self.busy_until[dst] = clock;
            self.work[dst] += units;
            for (to, payload, depart) in outbox {
                let hop = if to == dst { 0 } else { self.latency.message };
                self.push(Message { src: dst, dst: to, payload, send_time: depart, deliver_time: depart + hop });
            }
        }
        Ok(&self.trace)
    }

    /// One bulk-synchronous superstep.
    ///
    /// Every worker runs `local_work(k, &state)` against the same snapshot and
    /// returns its update and the work units it used; `sync` then applies all
    /// updates in worker order. Time advances by the slowest worker plus a
    /// gather and a broadcast hop.
    pub fn bsp_superstep<S, U>(
        &mut self,
        state: &mut S,
        local_work: impl Fn(usize, &S) -> Result<(U, u64)>,
        sync: impl FnOnce(&mut S, Vec<U>) -> Result<()>,
    ) -> Result<()> {
        let start = self.now;
        let master = self.master();
        let mut updates = Vec::with_capacity(self.workers);
        let mut arrival = start;
        for k in 0..self.workers {
            let (u, units) = local_work(k, state)?;
            self.work[k] += units;
            let done = start + units * self.latency.per_unit;
            self.busy_until[k] = done;
            let at = done + self.latency.message;
            arrival = arrival.max(at);
            self.record(at, k, master, "bsp_update");
            updates.push(u);
        }
        sync(state, updates)?;
        let end = arrival + self.latency.message;
        for k in 0..self.workers {
            self.record(end, master, k, "bsp_sync");
        }
        self.now = end;
        Ok(())
    }

    fn record(&mut self, time: u64, src: NodeId, dst: NodeId, kind: &'static str) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.trace.push(TraceEvent { time, seq, src, dst, kind });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::RefCell;
    use rand::Rng;

    #[derive(Clone, Debug, PartialEq)]
    enum Msg {
        Start,
        Work(u64),
        Done(u64),
        Bogus,
    }

    impl Payload for Msg {
        fn kind(&self) -> &'static str {
            match self {
                Msg::Start => "start",
                Msg::Work(_) => "work",
                Msg::Done(_) => "done",
                Msg::Bogus => "bogus",
            }
        }
    }

    /// Master scatters random amounts of work, workers report back.
    struct ScatterGather {
        workers: usize,
        results: Vec<u64>,
    }

    impl Handler<Msg> for ScatterGather {
        fn handle(&mut self, msg: Message<Msg>, ctx: &mut Ctx<'_, Msg>) -> Result<()> {
            match msg.payload {
                Msg::Start => {
                    let mut rng = ctx.rng(&[0]);
                    for k in 0..self.workers {
                        ctx.send(k, Msg::Work(rng.random_range(1..100)));
                    }
                }
                Msg::Work(units) => {
                    ctx.charge(units);
                    ctx.send(self.workers, Msg::Done(units));
                }
                Msg::Done(units) => self.results.push(units),
                Msg::Bogus => return Err(unhandled(&msg)),
            }
            Ok(())
        }
    }

    fn scatter(seed: u64, latency: LatencyModel) -> (Vec<TraceEvent>, Vec<u64>, SimStats) {
        let mut c = SimCluster::new(4, latency, Streams::new(seed));
        let m = c.master();
        c.inject(m, m, Msg::Start);
        let mut h = ScatterGather { workers: 4, results: Vec::new() };
        let trace = c.run_until_quiescent(&mut h).unwrap().to_vec();
        (trace, h.results, c.stats())
    }

    #[test]
    fn empty_queue_gives_empty_trace() {
        let mut c = SimCluster::<Msg>::new(2, LatencyModel::default(), Streams::new(1));
        let mut h = ScatterGather { workers: 2, results: Vec::new() };
        assert!(c.run_until_quiescent(&mut h).unwrap().is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let lat = LatencyModel { message: 3, per_unit: 2 };
        let a = scatter(5, lat);
        let b = scatter(5, lat);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.1, scatter(6, lat).1);
        let times: Vec<u64> = a.0.iter().map(|e| e.time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn equal_times_follow_sequence_numbers() {
        let mut c = SimCluster::new(3, LatencyModel::default(), Streams::new(1));
        for k in [2, 0, 1] {
            c.inject(3, k, Msg::Work(0));
        }
        let mut h = ScatterGather { workers: 3, results: Vec::new() };
        let trace = c.run_until_quiescent(&mut h).unwrap();
        let firsts: Vec<usize> = trace.iter().take(3).map(|e| e.dst).collect();
        assert_eq!(firsts, vec![2, 0, 1]);
        assert!(trace.windows(2).all(|w| (w[0].time, w[0].seq) < (w[1].time, w[1].seq) || w[0].time < w[1].time));
    }

    #[test]
    fn unhandled_kind_and_step_limit() {
        let mut c = SimCluster::new(1, LatencyModel::default(), Streams::new(1));
        c.inject(1, 0, Msg::Bogus);
        let mut h = ScatterGather { workers: 1, results: Vec::new() };
        assert!(matches!(c.run_until_quiescent(&mut h), Err(Error::Logic(_))));

        let mut c = SimCluster::new(4, LatencyModel::default(), Streams::new(1)).with_step_limit(3);
        c.inject(4, 4, Msg::Start);
        let mut h = ScatterGather { workers: 4, results: Vec::new() };
        assert_eq!(c.run_until_quiescent(&mut h).unwrap_err(), Error::Timeout { limit: 3 });
        assert_eq!(c.trace().len(), 3);
    }

    #[test]
    fn embarrassingly_parallel_speedup_is_k() {
        let mut c = SimCluster::new(8, LatencyModel { message: 0, per_unit: 1 }, Streams::new(1));
        for k in 0..8 {
            c.inject(8, k, Msg::Work(1000));
        }
        let mut h = ScatterGather { workers: 8, results: Vec::new() };
        c.run_until_quiescent(&mut h).unwrap();
        let s = c.stats().speedup();
        assert!((s - 8.0).abs() < 0.08, "{s}");
    }

    #[test]
    fn busy_nodes_queue_deliveries() {
        let mut c = SimCluster::new(1, LatencyModel { message: 0, per_unit: 1 }, Streams::new(1));
        c.inject(1, 0, Msg::Work(10));
        c.inject(1, 0, Msg::Work(10));
        let mut h = ScatterGather { workers: 1, results: Vec::new() };
        c.run_until_quiescent(&mut h).unwrap();
        assert_eq!(c.stats().makespan, 20);
        assert_eq!(c.node_work(0), 20);
    }

    #[test]
    fn bsp_single_worker_is_serial() {
        let mut c = SimCluster::<Msg>::new(1, LatencyModel::default(), Streams::new(1));
        let mut state = vec![1.0f64];
        for _ in 0..5 {
            c.bsp_superstep(&mut state, |_, s| Ok((s[0] * 2.0, 1)), |s, u| {
                s[0] = u[0];
                Ok(())
            })
            .unwrap();
        }
        assert_eq!(state[0], 32.0);
    }

    #[test]
    fn bsp_disjoint_writes_and_snapshot_isolation() {
        let mut c = SimCluster::<Msg>::new(4, LatencyModel { message: 2, per_unit: 1 }, Streams::new(1));
        let mut state = vec![0.0f64; 4];
        let reads = RefCell::new(Vec::new());
        for step in 1..=3 {
            c.bsp_superstep(
                &mut state,
                |k, s| {
                    // Read the right neighbour, write own key.
                    let nb = s[(k + 1) % 4];
                    reads.borrow_mut().push((step, k, nb));
                    Ok((step as f64 * 10.0 + k as f64, 5 + k as u64))
                },
                |s, u| {
                    for (k, v) in u.into_iter().enumerate() {
                        s[k] = v;
                    }
                    Ok(())
                },
            )
            .unwrap();
        }
        assert_eq!(state, vec![30.0, 31.0, 32.0, 33.0]);
        for &(step, k, nb) in reads.borrow().iter() {
            let before = if step == 1 { 0.0 } else { (step - 1) as f64 * 10.0 + ((k + 1) % 4) as f64 };
            assert_eq!(nb, before);
        }
        // Slowest worker takes 8 ticks, plus gather and broadcast.
        assert_eq!(c.now(), 3 * (8 + 2 + 2));
        assert_eq!(c.trace().iter().filter(|e| e.kind == "bsp_update").count(), 12);
    }
}
