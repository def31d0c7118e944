//! Random traces and brute-force causality oracles for tests and benches.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::events::{
    make_packet_id, Batch, ClockRef, CodeId, Event, EventId, EventKind, Nanos, NodeId,
};
use crate::netsim::{ObserverReport, REAL_EPOCH_NS};
use crate::timeline::TimelineGraph;

const MS: Nanos = 1_000_000;

#[derive(Debug, Clone, Copy)]
pub struct TraceParams {
    pub nodes: usize,
    pub max_events: usize,
    pub skew_bound_ns: Nanos,
    /// Probability that a send is never delivered.
    pub drop_prob: f64,
    /// Probability per step that the acting node crashes and later reboots.
    pub crash_prob: f64,
    pub code_kinds: u32,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams {
            nodes: 5,
            max_events: 200,
            skew_bound_ns: 100 * MS,
            drop_prob: 0.1,
            crash_prob: 0.01,
            code_kinds: 6,
        }
    }
}

/// A complete execution and everything its observers reported about it.
#[derive(Debug, Clone)]
pub struct GeneratedTrace {
    pub node_count: usize,
    pub skew_bound_ns: Nanos,
    /// Every event, in true-time order.
    pub events: Vec<Event>,
    /// Reports in the order the mediator receives them.
    pub reports: Vec<ObserverReport>,
}

struct NodeGen {
    offset: Nanos,
    epoch: u32,
    seq: u64,
    sends: u64,
    down_until: Option<Nanos>,
    flush_every: Nanos,
    next_flush: Nanos,
    batch_no: u64,
    buffer: Vec<Event>,
}

/// Generates a random message-passing execution. Clocks are skewed by up to
/// `skew_bound_ns`, batches are flushed periodically and arrive with jitter,
/// nodes occasionally crash and reboot.
pub fn random_trace(rng: &mut impl Rng, p: TraceParams) -> GeneratedTrace {
    let mut nodes: Vec<NodeGen> = (0..p.nodes)
        .map(|_| {
            let flush_every = rng.gen_range(20..=150) * MS;
            NodeGen {
                offset: rng.gen_range(0..=p.skew_bound_ns),
                epoch: 0,
                seq: 0,
                sends: 0,
                down_until: None,
                flush_every,
                next_flush: rng.gen_range(1..=flush_every),
                batch_no: 0,
                buffer: Vec::new(),
            }
        })
        .collect();
    // (arrival time, tiebreak, report)
    let mut arrivals: Vec<(Nanos, u64, ObserverReport)> = Vec::new();
    let mut tie = 0u64;
    let mut arrive = |at: Nanos, r: ObserverReport, arrivals: &mut Vec<_>| {
        tie += 1;
        arrivals.push((at, tie, r));
    };
    for (i, n) in nodes.iter().enumerate() {
        let clock = ClockRef {
            node: NodeId(i as u16),
            epoch: 0,
            mono_anchor: 0,
            real_anchor: REAL_EPOCH_NS + n.offset,
            skew_bound_ns: p.skew_bound_ns,
        };
        arrive(0, ObserverReport::Clock(clock), &mut arrivals);
    }

    let mut events = Vec::new();
    let mut inflight: BinaryHeap<Reverse<(Nanos, u64, u16, u64)>> = BinaryHeap::new();
    let mut t: Nanos = 0;
    let mut order = 0u64;

    fn flush_until(
        node: usize,
        n: &mut NodeGen,
        upto: Nanos,
        rng: &mut impl Rng,
        out: &mut Vec<(Nanos, u64, ObserverReport)>,
        tie: &mut u64,
    ) {
        while n.next_flush <= upto {
            let at = n.next_flush;
            let split = n.buffer.partition_point(|e| e.mono_ts <= at);
            let evs: Vec<Event> = n.buffer.drain(..split).collect();
            let b = Batch { node: NodeId(node as u16), epoch: n.epoch, seq_no: n.batch_no, flushed_at: at, events: evs };
            n.batch_no += 1;
            *tie += 1;
            out.push((at + rng.gen_range(0..=300) * MS, *tie, ObserverReport::Batch(b)));
            n.next_flush += n.flush_every;
        }
    }

    let record = |n: &mut NodeGen, node: usize, at: Nanos, kind, packet, events: &mut Vec<Event>| {
        let ev = Event { node: NodeId(node as u16), mono_ts: at, kind, packet, seq_in_node: n.seq };
        n.seq += 1;
        n.buffer.push(ev);
        events.push(ev);
    };

    while events.len() < p.max_events {
        t += rng.gen_range(1..=10) * MS;
        while let Some(Reverse((at, _, dst, pid))) = inflight.peek().copied() {
            if at > t || events.len() >= p.max_events {
                break;
            }
            inflight.pop();
            let d = dst as usize;
            if nodes[d].down_until.is_some() {
                continue;
            }
            for (i, n) in nodes.iter_mut().enumerate() {
                if n.down_until.is_none() {
                    flush_until(i, n, at - 1, rng, &mut arrivals, &mut tie);
                }
            }
            record(&mut nodes[d], d, at, EventKind::PacketRecv, Some(crate::events::PacketId(pid)), &mut events);
        }
        // Reboots that are due.
        for i in 0..p.nodes {
            if nodes[i].down_until.is_some_and(|u| u <= t) {
                let n = &mut nodes[i];
                n.down_until = None;
                n.epoch += 1;
                n.batch_no = 0;
                n.next_flush = t + n.flush_every;
                let clock = ClockRef {
                    node: NodeId(i as u16),
                    epoch: n.epoch,
                    mono_anchor: t,
                    real_anchor: REAL_EPOCH_NS + t + n.offset,
                    skew_bound_ns: p.skew_bound_ns,
                };
                tie += 1;
                arrivals.push((t, tie, ObserverReport::Clock(clock)));
            }
        }
        for (i, n) in nodes.iter_mut().enumerate() {
            if n.down_until.is_none() {
                flush_until(i, n, t - 1, rng, &mut arrivals, &mut tie);
            }
        }
        if events.len() >= p.max_events {
            break;
        }
        let alive: Vec<usize> = (0..p.nodes).filter(|&i| nodes[i].down_until.is_none()).collect();
        let Some(&actor) = alive.choose(rng) else { continue };
        let roll: f64 = rng.gen();
        if roll < p.crash_prob && alive.len() > 1 {
            let n = &mut nodes[actor];
            // Final flush, then the node is gone for a while.
            let evs = std::mem::take(&mut n.buffer);
            let b = Batch { node: NodeId(actor as u16), epoch: n.epoch, seq_no: n.batch_no, flushed_at: t, events: evs };
            n.batch_no += 1;
            tie += 1;
            arrivals.push((t + rng.gen_range(0..=300) * MS, tie, ObserverReport::Batch(b)));
            tie += 1;
            arrivals.push((
                t,
                tie,
                ObserverReport::Down { node: NodeId(actor as u16), epoch: n.epoch, batches: n.batch_no },
            ));
            n.down_until = Some(t + rng.gen_range(50..=400) * MS);
        } else if roll < 0.4 {
            let kind = EventKind::Code(CodeId(rng.gen_range(0..p.code_kinds)));
            record(&mut nodes[actor], actor, t, kind, None, &mut events);
        } else {
            let mut dst = rng.gen_range(0..p.nodes - 1);
            if dst >= actor {
                dst += 1;
            }
            let n = &mut nodes[actor];
            let pid = make_packet_id(NodeId(actor as u16), NodeId(dst as u16), n.sends);
            n.sends += 1;
            record(n, actor, t, EventKind::PacketSend, Some(pid), &mut events);
            if !rng.gen_bool(p.drop_prob) {
                order += 1;
                inflight.push(Reverse((t + rng.gen_range(1..=50) * MS, order, dst as u16, pid.0)));
            }
        }
    }

    // Everyone flushes what is left and goes down, so the whole trace drains.
    let end = t + 1;
    for (i, n) in nodes.iter_mut().enumerate() {
        if n.down_until.is_some() {
            continue;
        }
        flush_until(i, n, end - 1, rng, &mut arrivals, &mut tie);
        let evs = std::mem::take(&mut n.buffer);
        let b = Batch { node: NodeId(i as u16), epoch: n.epoch, seq_no: n.batch_no, flushed_at: end, events: evs };
        n.batch_no += 1;
        tie += 1;
        arrivals.push((end + rng.gen_range(0..=300) * MS, tie, ObserverReport::Batch(b)));
        tie += 1;
        arrivals.push((end, tie, ObserverReport::Down { node: NodeId(i as u16), epoch: n.epoch, batches: n.batch_no }));
    }
    arrivals.sort_by_key(|(at, tie, _)| (*at, *tie));
    GeneratedTrace {
        node_count: p.nodes,
        skew_bound_ns: p.skew_bound_ns,
        events,
        reports: arrivals.into_iter().map(|(_, _, r)| r).collect(),
    }
}

/// Textbook vector clocks over a trace listed in an order where every
/// receive follows its send.
pub fn vector_clocks(events: &[Event], node_count: usize) -> BTreeMap<EventId, Vec<u64>> {
    let mut current = vec![vec![0u64; node_count]; node_count];
    let mut at_send: BTreeMap<crate::events::PacketId, Vec<u64>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for ev in events {
        let n = ev.node.index();
        if let (EventKind::PacketRecv, Some(p)) = (ev.kind, ev.packet) {
            if let Some(sent) = at_send.get(&p) {
                for (c, s) in current[n].iter_mut().zip(sent) {
                    *c = (*c).max(*s);
                }
            }
        }
        current[n][n] += 1;
        if let (EventKind::PacketSend, Some(p)) = (ev.kind, ev.packet) {
            at_send.insert(p, current[n].clone());
        }
        out.insert(ev.id(), current[n].clone());
    }
    out
}

/// Whether `a` happens strictly before `b` under the given vector clocks.
pub fn happens_before(vc: &BTreeMap<EventId, Vec<u64>>, a: EventId, b: EventId) -> bool {
    a != b && vc[&a][a.node.index()] <= vc[&b][a.node.index()]
}

/// Strict causal ancestors of every vertex, by reachability over the graph's
/// program-order and cross edges.
pub fn graph_ancestors(g: &TimelineGraph) -> BTreeMap<EventId, Vec<EventId>> {
    let index: BTreeMap<EventId, usize> =
        g.vertices.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let words = g.vertices.len().div_ceil(64);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); g.vertices.len()];
    for (a, b) in g.program_edges().into_iter().chain(g.cross_edges.iter().copied()) {
        preds[index[&b]].push(index[&a]);
    }
    // Vertices are topologically ordered, so one pass suffices; still
    // verify instead of trusting it.
    let mut anc = vec![vec![0u64; words]; g.vertices.len()];
    for v in 0..g.vertices.len() {
        for &p in &preds[v] {
            assert!(p < v, "vertex order is not topological");
            let (lo, hi) = anc.split_at_mut(v);
            for (w, x) in hi[0].iter_mut().zip(&lo[p]) {
                *w |= *x;
            }
            hi[0][p / 64] |= 1 << (p % 64);
        }
    }
    g.vertices
        .iter()
        .enumerate()
        .map(|(v, ev)| {
            let ids = (0..g.vertices.len())
                .filter(|&u| anc[v][u / 64] >> (u % 64) & 1 == 1)
                .map(|u| g.vertices[u].id())
                .collect();
            (ev.id(), ids)
        })
        .collect()
}

/// A uniformly random topological order of the graph's vertices (each step
/// picks uniformly among the ready vertices).
pub fn random_topological_order(g: &TimelineGraph, rng: &mut impl Rng) -> Vec<Event> {
    let index: BTreeMap<EventId, usize> =
        g.vertices.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut indeg = vec![0usize; g.vertices.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); g.vertices.len()];
    for (a, b) in g.program_edges().into_iter().chain(g.cross_edges.iter().copied()) {
        let (a, b) = (index[&a], index[&b]);
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut ready: Vec<usize> = (0..g.vertices.len()).filter(|&v| indeg[v] == 0).collect();
    let mut out = Vec::with_capacity(g.vertices.len());
    while !ready.is_empty() {
        let k = rng.gen_range(0..ready.len());
        let v = ready.swap_remove(k);
        out.push(g.vertices[v]);
        for &s in &succ[v] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    out
}

/// The whole trace as one graph, for tests that need a prefix-closed graph
/// without going through the timeline builder. Receives whose send is
/// missing from `events` are dropped along with everything after them on
/// their node.
pub fn trace_graph(events: &[Event]) -> TimelineGraph {
    let mut g = TimelineGraph::default();
    let mut sends: BTreeMap<crate::events::PacketId, EventId> = BTreeMap::new();
    let mut cut: BTreeMap<NodeId, bool> = BTreeMap::new();
    for ev in events {
        if cut.get(&ev.node).copied().unwrap_or(false) {
            continue;
        }
        match (ev.kind, ev.packet) {
            (EventKind::PacketSend, Some(p)) => {
                sends.insert(p, ev.id());
            }
            (EventKind::PacketRecv, Some(p)) => match sends.remove(&p) {
                Some(s) => g.cross_edges.push((s, ev.id())),
                None => {
                    cut.insert(ev.node, true);
                    continue;
                }
            },
            _ => {}
        }
        g.vertices.push(*ev);
    }
    g.to_infinity = sends.into_values().collect();
    g.to_infinity.sort();
    g
}

/// Outcome of replaying a generated trace through the timeline builder and
/// comparing every emitted slice with the vector-clock oracle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub slices: usize,
    pub vertices: usize,
    /// Vertices whose graph ancestors differ from the oracle's predecessors.
    pub ancestor_mismatches: usize,
    /// Receives emitted before their send, or vertices emitted before one of
    /// their causal predecessors.
    pub closure_violations: usize,
    /// Trace events never emitted although every node was sealed.
    pub missing_at_end: usize,
}

impl OracleReport {
    pub fn is_clean(&self) -> bool {
        self.ancestor_mismatches == 0 && self.closure_violations == 0 && self.missing_at_end == 0
    }
}

pub fn check_timeline(trace: &GeneratedTrace) -> Result<OracleReport, crate::timeline::TimelineError> {
    use std::collections::BTreeSet;
    let vc = vector_clocks(&trace.events, trace.node_count);
    let mut tl = crate::timeline::Timeline::new(trace.node_count, trace.skew_bound_ns);
    let mut cumulative = TimelineGraph::default();
    let mut present: BTreeSet<EventId> = BTreeSet::new();
    let mut report = OracleReport::default();
    for r in &trace.reports {
        tl.apply(r.clone())?;
        let slice = tl.build_prefix_closed()?;
        if slice.is_empty() {
            continue;
        }
        report.slices += 1;
        let sends: BTreeMap<EventId, EventId> = slice.cross_edges.iter().map(|(s, r)| (*r, *s)).collect();
        for v in &slice.vertices {
            let id = v.id();
            if let Some(s) = sends.get(&id) {
                if !present.contains(s) {
                    report.closure_violations += 1;
                }
            } else if v.kind == EventKind::PacketRecv {
                report.closure_violations += 1;
            }
            let preds_present = vc
                .keys()
                .filter(|u| happens_before(&vc, **u, id))
                .all(|u| present.contains(u));
            if !preds_present {
                report.closure_violations += 1;
            }
            present.insert(id);
        }
        cumulative.extend(&slice)?;
        let anc = graph_ancestors(&cumulative);
        for v in &slice.vertices {
            let id = v.id();
            let expected: Vec<EventId> =
                cumulative.vertices.iter().map(|u| u.id()).filter(|&u| happens_before(&vc, u, id)).collect();
            let mut got = anc[&id].clone();
            got.sort();
            let mut expected = expected;
            expected.sort();
            if got != expected {
                report.ancestor_mismatches += 1;
            }
        }
    }
    report.vertices = cumulative.len();
    report.missing_at_end = trace.events.iter().filter(|e| !present.contains(&e.id())).count();
    Ok(report)
}
