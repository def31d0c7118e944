//! Mediator-side timeline reconstruction.
//!
//! Batches from every observer are put back in order per node, converted to
//! approximate wall-clock time through each boot's [`ClockRef`], and then cut
//! into prefix-closed slices: every event handed out comes after all of its
//! causal predecessors, either in the same slice or in an earlier one.
//!
//! Which events are safe to hand out is decided from real time alone. Let
//! `ts` be the earliest point up to which every node has reported. Any event
//! stamped no later than `ts - cs` (with `cs` the skew bound) can only have
//! causal predecessors stamped no later than `ts + cs`, all of which have been
//! ingested. The fixpoint then pulls in the sends those events depend on.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::events::{Batch, ClockRef, Event, EventId, EventKind, Nanos, NodeId, PacketId};
use crate::netsim::ObserverReport;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimelineError {
    #[error("batch {seq_no} of node {node} epoch {epoch} was already ingested")]
    DuplicateBatch { node: NodeId, epoch: u32, seq_no: u64 },
    #[error("clock for node {node} epoch {epoch} announced twice")]
    DuplicateClock { node: NodeId, epoch: u32 },
    #[error("node {0} is not part of this timeline")]
    UnknownNode(NodeId),
    #[error("receive {recv:?} of packet {packet:?} has no matching send in the ingested history")]
    OrphanReceive { recv: EventId, packet: PacketId },
    #[error("send {send:?} for receive {recv:?} lies beyond the clock skew window")]
    SkewViolation { send: EventId, recv: EventId },
    #[error("graph delta does not extend the current graph: {0}")]
    NotExtension(String),
}

#[derive(Debug, Clone, Default)]
struct NodeTimeline {
    clocks: BTreeMap<u32, ClockRef>,
    epoch: u32,
    next_seq: u64,
    /// Real time of the last flush ingested in the current epoch.
    flushed_real: Option<Nanos>,
    held: BTreeMap<(u32, u64), Batch>,
    down: BTreeMap<u32, u64>,
    /// Absolute index of `events[0]`; older events were retired.
    base: usize,
    events: Vec<Event>,
    real: Vec<Nanos>,
    /// Absolute index of the first event not yet emitted.
    emitted: usize,
}

impl NodeTimeline {
    fn len(&self) -> usize {
        self.base + self.events.len()
    }

    fn event(&self, idx: usize) -> &Event {
        &self.events[idx - self.base]
    }

    fn real_at(&self, idx: usize) -> Nanos {
        self.real[idx - self.base]
    }

    fn sealed(&self) -> bool {
        self.down.get(&self.epoch) == Some(&self.next_seq)
    }

    /// Real time up to which this node has reported everything, or `None`
    /// before its first clock announcement.
    fn horizon(&self) -> Option<Nanos> {
        if self.sealed() {
            return Some(Nanos::MAX);
        }
        let clock = self.clocks.get(&self.epoch)?;
        Some(self.flushed_real.unwrap_or(clock.real_anchor))
    }

    /// Moves held batches into the event list while they are next in line.
    fn drain(&mut self) -> Vec<(PacketId, usize)> {
        let mut sends = Vec::new();
        loop {
            if self.sealed() && self.clocks.contains_key(&(self.epoch + 1)) {
                self.epoch += 1;
                self.next_seq = 0;
                self.flushed_real = None;
                continue;
            }
            let Some(clock) = self.clocks.get(&self.epoch).copied() else { break };
            let Some(batch) = self.held.remove(&(self.epoch, self.next_seq)) else { break };
            for ev in batch.events {
                let real = clock.mono_to_real(ev.mono_ts).unwrap_or(clock.real_anchor);
                if ev.kind == EventKind::PacketSend {
                    if let Some(p) = ev.packet {
                        sends.push((p, self.len()));
                    }
                }
                self.events.push(ev);
                self.real.push(real);
            }
            self.flushed_real = clock.mono_to_real(batch.flushed_at).ok();
            self.next_seq += 1;
        }
        sends
    }

    fn retire(&mut self) {
        let done = self.emitted - self.base;
        if done >= 4096 {
            self.events.drain(..done);
            self.real.drain(..done);
            self.base = self.emitted;
        }
    }
}

/// Index ranges `[start, prefix_end)` and `[start, extension_end)` into one
/// node's ingested events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRanges {
    pub start: usize,
    pub prefix_end: usize,
    pub extension_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranges {
    /// Real time up to which all nodes have reported; `None` until every
    /// node has announced a clock.
    pub ts: Option<Nanos>,
    pub nodes: Vec<NodeRanges>,
}

/// A prefix-closed slice of the timeline.
///
/// Vertices are listed in a topological order. Program-order edges join
/// consecutive vertices of the same node; cross edges join a send to its
/// receive. Sends whose receive is not in the graph point at infinity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimelineGraph {
    pub vertices: Vec<Event>,
    pub cross_edges: Vec<(EventId, EventId)>,
    pub to_infinity: Vec<EventId>,
}

impl TimelineGraph {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn program_edges(&self) -> Vec<(EventId, EventId)> {
        let mut last: BTreeMap<NodeId, EventId> = BTreeMap::new();
        let mut edges = Vec::new();
        for v in &self.vertices {
            if let Some(prev) = last.insert(v.node, v.id()) {
                edges.push((prev, v.id()));
            }
        }
        edges
    }

    /// Appends a later slice. Sends pointing at infinity are repointed at
    /// receives that arrive with the slice.
    pub fn extend(&mut self, delta: &TimelineGraph) -> Result<(), TimelineError> {
        let mut tails: BTreeMap<NodeId, u64> = BTreeMap::new();
        for v in &self.vertices {
            tails.insert(v.node, v.seq_in_node);
        }
        for v in &delta.vertices {
            if tails.get(&v.node).is_some_and(|&t| t >= v.seq_in_node) {
                return Err(TimelineError::NotExtension(format!("{:?} already present", v.id())));
            }
            tails.insert(v.node, v.seq_in_node);
        }
        let matched: std::collections::HashSet<EventId> =
            delta.cross_edges.iter().map(|(s, _)| *s).collect();
        self.to_infinity.retain(|s| !matched.contains(s));
        self.vertices.extend_from_slice(&delta.vertices);
        self.cross_edges.extend_from_slice(&delta.cross_edges);
        self.to_infinity.extend_from_slice(&delta.to_infinity);
        Ok(())
    }

    /// Graphviz rendering: one row per node, causal arrows between rows.
    pub fn to_dot(&self, label: impl Fn(&EventKind) -> String) -> String {
        let name = |id: EventId| format!("\"{}.{}\"", id.node.0, id.seq);
        let mut by_node: BTreeMap<NodeId, Vec<&Event>> = BTreeMap::new();
        for v in &self.vertices {
            by_node.entry(v.node).or_default().push(v);
        }
        let mut out = String::from("digraph timeline {\n  node [shape=box, fontsize=10];\n");
        for (node, evs) in &by_node {
            let _ = writeln!(out, "  subgraph row_{} {{\n    rank=same;", node.0);
            let _ = writeln!(out, "    \"{node}\" [shape=plaintext];");
            for ev in evs {
                let _ = writeln!(out, "    {} [label=\"{}\"];", name(ev.id()), label(&ev.kind));
            }
            out.push_str("  }\n");
            if let Some(first) = evs.first() {
                let _ = writeln!(out, "  \"{node}\" -> {} [style=invis];", name(first.id()));
            }
        }
        for (a, b) in self.program_edges() {
            let _ = writeln!(out, "  {} -> {};", name(a), name(b));
        }
        for (s, r) in &self.cross_edges {
            let _ = writeln!(out, "  {} -> {} [color=blue, constraint=false];", name(*s), name(*r));
        }
        if !self.to_infinity.is_empty() {
            out.push_str("  infinity [label=\"∞\", shape=circle];\n");
            for s in &self.to_infinity {
                let _ = writeln!(out, "  {} -> infinity [color=gray, style=dashed];", name(*s));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Where an ingested but not yet emitted send sits.
type SendSlot = (NodeId, usize);

#[derive(Debug, Clone)]
pub struct Timeline {
    skew_bound_ns: Nanos,
    nodes: Vec<NodeTimeline>,
    unemitted_sends: HashMap<PacketId, SendSlot>,
    pending_sends: HashMap<PacketId, EventId>,
}

impl Timeline {
    pub fn new(node_count: usize, skew_bound_ns: Nanos) -> Self {
        Timeline {
            skew_bound_ns,
            nodes: vec![NodeTimeline::default(); node_count],
            unemitted_sends: HashMap::new(),
            pending_sends: HashMap::new(),
        }
    }

    fn node_mut(&mut self, node: NodeId) -> Result<&mut NodeTimeline, TimelineError> {
        self.nodes.get_mut(node.index()).ok_or(TimelineError::UnknownNode(node))
    }

    fn absorb(&mut self, node: NodeId) -> Result<(), TimelineError> {
        let sends = self.node_mut(node)?.drain();
        for (p, idx) in sends {
            self.unemitted_sends.insert(p, (node, idx));
        }
        Ok(())
    }

    pub fn announce(&mut self, clock: ClockRef) -> Result<(), TimelineError> {
        let nt = self.node_mut(clock.node)?;
        if nt.clocks.insert(clock.epoch, clock).is_some() {
            return Err(TimelineError::DuplicateClock { node: clock.node, epoch: clock.epoch });
        }
        self.absorb(clock.node)
    }

    /// Accepts a batch in any order; it joins the timeline once all of its
    /// predecessors have.
    pub fn ingest(&mut self, batch: Batch) -> Result<(), TimelineError> {
        let node = batch.node;
        let nt = self.node_mut(node)?;
        let key = (batch.epoch, batch.seq_no);
        if key < (nt.epoch, nt.next_seq) || nt.held.contains_key(&key) {
            return Err(TimelineError::DuplicateBatch { node, epoch: key.0, seq_no: key.1 });
        }
        nt.held.insert(key, batch);
        self.absorb(node)
    }

    /// Records that `node` went down after producing `batches` batches in
    /// `epoch`. Once those are in, the node no longer holds back `ts`.
    pub fn mark_down(&mut self, node: NodeId, epoch: u32, batches: u64) -> Result<(), TimelineError> {
        self.node_mut(node)?.down.insert(epoch, batches);
        self.absorb(node)
    }

    pub fn apply(&mut self, report: ObserverReport) -> Result<(), TimelineError> {
        match report {
            ObserverReport::Clock(c) => self.announce(c),
            ObserverReport::Batch(b) => self.ingest(b),
            ObserverReport::Down { node, epoch, batches } => self.mark_down(node, epoch, batches),
        }
    }

    /// Number of gapless batches ingested in the current epoch of `node`.
    pub fn frontier(&self, node: NodeId) -> Option<(u32, u64)> {
        self.nodes.get(node.index()).map(|n| (n.epoch, n.next_seq))
    }

    pub fn horizon(&self, node: NodeId) -> Option<Nanos> {
        self.nodes.get(node.index()).and_then(NodeTimeline::horizon)
    }

    pub fn ingested_len(&self, node: NodeId) -> usize {
        self.nodes.get(node.index()).map_or(0, NodeTimeline::len)
    }

    pub fn ready_ranges(&self) -> Ranges {
        let ts = self.nodes.iter().map(NodeTimeline::horizon).try_fold(Nanos::MAX, |acc, h| {
            h.map(|h| acc.min(h))
        });
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let start = n.emitted;
                let Some(ts) = ts else {
                    return NodeRanges { start, prefix_end: start, extension_end: start };
                };
                let upto = |bound: Nanos| {
                    (start..n.len()).find(|&i| n.real_at(i) > bound).unwrap_or(n.len())
                };
                NodeRanges {
                    start,
                    prefix_end: upto(ts.saturating_sub(self.skew_bound_ns)),
                    extension_end: upto(ts.saturating_add(self.skew_bound_ns)),
                }
            })
            .collect();
        Ranges { ts, nodes }
    }

    /// Emits the next prefix-closed slice of the timeline.
    pub fn build_prefix_closed(&mut self) -> Result<TimelineGraph, TimelineError> {
        let ranges = self.ready_ranges();
        let n = self.nodes.len();

        // Link sources: sends inside the extension ranges.
        let mut links: HashMap<PacketId, SendSlot> = HashMap::new();
        for (i, (nt, r)) in self.nodes.iter().zip(&ranges.nodes).enumerate() {
            for idx in r.start..r.extension_end {
                let ev = nt.event(idx);
                if let (EventKind::PacketSend, Some(p)) = (ev.kind, ev.packet) {
                    links.insert(p, (NodeId(i as u16), idx));
                }
            }
        }

        let mut rw: Vec<usize> = ranges.nodes.iter().map(|r| r.start).collect();
        let mut ln: Vec<usize> = ranges.nodes.iter().map(|r| r.prefix_end).collect();
        while (0..n).any(|i| rw[i] != ln[i]) {
            for i in 0..n {
                while rw[i] != ln[i] {
                    for idx in rw[i]..ln[i] {
                        let ev = *self.nodes[i].event(idx);
                        if let (EventKind::PacketRecv, Some(p)) = (ev.kind, ev.packet) {
                            if let Some(&(src, sidx)) = links.get(&p) {
                                let s = src.index();
                                ln[s] = ln[s].max(sidx + 1);
                            } else if !self.pending_sends.contains_key(&p) {
                                return Err(self.missing_send(ev, p));
                            }
                        }
                        rw[i] = idx + 1;
                    }
                }
            }
        }
        Ok(self.emit(&ln))
    }

    fn missing_send(&self, recv: Event, packet: PacketId) -> TimelineError {
        match self.unemitted_sends.get(&packet) {
            Some(&(node, idx)) => TimelineError::SkewViolation {
                send: self.nodes[node.index()].event(idx).id(),
                recv: recv.id(),
            },
            None => TimelineError::OrphanReceive { recv: recv.id(), packet },
        }
    }

    /// Outputs events up to `ln` in a topological order.
    fn emit(&mut self, ln: &[usize]) -> TimelineGraph {
        let mut graph = TimelineGraph::default();
        let mut cursor: Vec<usize> = self.nodes.iter().map(|nt| nt.emitted).collect();
        let mut new_sends: Vec<EventId> = Vec::new();
        loop {
            let mut progressed = false;
            for i in 0..self.nodes.len() {
                while cursor[i] < ln[i] {
                    let ev = *self.nodes[i].event(cursor[i]);
                    match (ev.kind, ev.packet) {
                        (EventKind::PacketRecv, Some(p)) => {
                            let Some(send) = self.pending_sends.remove(&p) else { break };
                            graph.cross_edges.push((send, ev.id()));
                        }
                        (EventKind::PacketSend, Some(p)) => {
                            self.unemitted_sends.remove(&p);
                            self.pending_sends.insert(p, ev.id());
                            new_sends.push(ev.id());
                        }
                        _ => {}
                    }
                    graph.vertices.push(ev);
                    cursor[i] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        debug_assert_eq!(cursor, ln, "prefix-closed cut has a topological order");
        let matched: std::collections::HashSet<EventId> =
            graph.cross_edges.iter().map(|(s, _)| *s).collect();
        graph.to_infinity = new_sends.into_iter().filter(|s| !matched.contains(s)).collect();
        for (nt, &end) in self.nodes.iter_mut().zip(ln) {
            nt.emitted = end;
            nt.retire();
        }
        graph
    }

    /// Sends already emitted whose receive has not been emitted yet.
    pub fn pending_send_count(&self) -> usize {
        self.pending_sends.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::CodeId;

    const CS: Nanos = 100;

    fn clock(node: u16, offset: Nanos) -> ClockRef {
        ClockRef { node: NodeId(node), epoch: 0, mono_anchor: 0, real_anchor: offset, skew_bound_ns: CS }
    }

    fn ev(node: u16, seq: u64, t: Nanos, kind: EventKind, packet: Option<u64>) -> Event {
        Event { node: NodeId(node), mono_ts: t, kind, packet: packet.map(PacketId), seq_in_node: seq }
    }

    fn code(node: u16, seq: u64, t: Nanos) -> Event {
        ev(node, seq, t, EventKind::Code(CodeId(seq as u32)), None)
    }

    fn batch(node: u16, seq_no: u64, flushed_at: Nanos, events: Vec<Event>) -> Batch {
        Batch { node: NodeId(node), epoch: 0, seq_no, flushed_at, events }
    }

    #[test]
    fn reorders_out_of_order_batches() {
        let mut t = Timeline::new(1, CS);
        t.announce(clock(0, 0)).unwrap();
        t.ingest(batch(0, 0, 10, vec![code(0, 0, 5)])).unwrap();
        t.ingest(batch(0, 2, 30, vec![code(0, 2, 25)])).unwrap();
        assert_eq!(t.frontier(NodeId(0)), Some((0, 1)));
        t.ingest(batch(0, 1, 20, vec![code(0, 1, 15)])).unwrap();
        assert_eq!(t.frontier(NodeId(0)), Some((0, 3)));
        assert_eq!(t.ingested_len(NodeId(0)), 3);
        let seqs: Vec<u64> = t.nodes[0].events.iter().map(|e| e.seq_in_node).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
    }

    #[test]
    fn duplicate_batch_is_rejected_without_change() {
        let mut t = Timeline::new(1, CS);
        t.announce(clock(0, 0)).unwrap();
        t.ingest(batch(0, 0, 10, vec![code(0, 0, 5)])).unwrap();
        t.ingest(batch(0, 1, 20, vec![code(0, 1, 15)])).unwrap();
        let err = t.ingest(batch(0, 1, 20, vec![code(0, 1, 15)])).unwrap_err();
        assert_eq!(err, TimelineError::DuplicateBatch { node: NodeId(0), epoch: 0, seq_no: 1 });
        assert_eq!(t.ingested_len(NodeId(0)), 2);
        t.ingest(batch(0, 3, 40, vec![])).unwrap();
        assert!(t.ingest(batch(0, 3, 40, vec![])).is_err());
    }

    #[test]
    fn heartbeat_advances_frontier_and_horizon() {
        let mut t = Timeline::new(1, CS);
        t.announce(clock(0, 1_000)).unwrap();
        assert_eq!(t.horizon(NodeId(0)), Some(1_000));
        t.ingest(batch(0, 0, 500, vec![])).unwrap();
        assert_eq!(t.frontier(NodeId(0)), Some((0, 1)));
        assert_eq!(t.horizon(NodeId(0)), Some(1_500));
    }

    #[test]
    fn silent_node_holds_back_every_prefix() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 0)).unwrap();
        t.ingest(batch(0, 0, 10_000, (0..5).map(|s| code(0, s, 50 + s * 1_000)).collect())).unwrap();
        let r = t.ready_ranges();
        assert_eq!(r.ts, Some(0));
        assert!(r.nodes.iter().all(|n| n.prefix_end == n.start));
        assert_eq!(r.nodes[0].extension_end, 1, "only the event at real 50 is within ts + cs");
    }

    #[test]
    fn quiescent_ranges_follow_the_formula() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 0)).unwrap();
        let evs: Vec<Event> = (0..10).map(|s| code(0, s, 850 + s * 50)).collect();
        t.ingest(batch(0, 0, 1_000, evs)).unwrap();
        t.ingest(batch(1, 0, 1_000, vec![])).unwrap();
        // ts = 1000: prefix is real <= 900, extension real <= 1100.
        let r = t.ready_ranges();
        assert_eq!(r.ts, Some(1_000));
        assert_eq!(r.nodes[0].prefix_end, 2);
        assert_eq!(r.nodes[0].extension_end, 6);
    }

    #[test]
    fn unannounced_node_blocks_ranges() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.ingest(batch(0, 0, 1_000, vec![code(0, 0, 1)])).unwrap();
        assert_eq!(t.ready_ranges().ts, None);
        assert!(t.build_prefix_closed().unwrap().is_empty());
    }

    #[test]
    fn single_node_chain() {
        let mut t = Timeline::new(1, CS);
        t.announce(clock(0, 0)).unwrap();
        t.ingest(batch(0, 0, 1_000, (0..3).map(|s| code(0, s, s * 10)).collect())).unwrap();
        let g = t.build_prefix_closed().unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.program_edges().len(), 2);
        assert!(g.cross_edges.is_empty());
    }

    #[test]
    fn send_beyond_prefix_is_pulled_in() {
        // Node 1's clock runs 80 ahead; its send stamped later than node 0's
        // receive in real time still has to come first.
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 80)).unwrap();
        t.ingest(batch(1, 0, 1_000, vec![
            code(1, 0, 700),
            ev(1, 1, 950, EventKind::PacketSend, Some(9)),
        ]))
        .unwrap();
        t.ingest(batch(0, 0, 1_100, vec![ev(0, 0, 960, EventKind::PacketRecv, Some(9))])).unwrap();
        // ts = min(1100, 1080) = 1080; prefix bound 980.
        let r = t.ready_ranges();
        assert_eq!((r.nodes[0].prefix_end, r.nodes[1].prefix_end), (1, 1));
        let g = t.build_prefix_closed().unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.cross_edges, vec![(EventId { node: NodeId(1), seq: 1 }, EventId { node: NodeId(0), seq: 0 })]);
        let pos = |id: EventId| g.vertices.iter().position(|v| v.id() == id).unwrap();
        assert!(pos(g.cross_edges[0].0) < pos(g.cross_edges[0].1));
    }

    #[test]
    fn unmatched_send_points_to_infinity_then_repoints() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 0)).unwrap();
        t.ingest(batch(0, 0, 1_000, vec![ev(0, 0, 100, EventKind::PacketSend, Some(4))])).unwrap();
        t.ingest(batch(1, 0, 1_000, vec![])).unwrap();
        let mut g = t.build_prefix_closed().unwrap();
        assert_eq!(g.to_infinity, vec![EventId { node: NodeId(0), seq: 0 }]);
        t.ingest(batch(0, 1, 2_000, vec![])).unwrap();
        t.ingest(batch(1, 1, 2_000, vec![ev(1, 0, 1_500, EventKind::PacketRecv, Some(4))])).unwrap();
        let d = t.build_prefix_closed().unwrap();
        assert_eq!(d.cross_edges.len(), 1);
        g.extend(&d).unwrap();
        assert!(g.to_infinity.is_empty());
        assert!(g.extend(&d).is_err());
    }

    #[test]
    fn orphan_receive_is_diagnosed() {
        let mut t = Timeline::new(1, CS);
        t.announce(clock(0, 0)).unwrap();
        t.ingest(batch(0, 0, 1_000, vec![ev(0, 0, 10, EventKind::PacketRecv, Some(77))])).unwrap();
        assert!(matches!(t.build_prefix_closed(), Err(TimelineError::OrphanReceive { .. })));
    }

    #[test]
    fn crashed_node_stops_holding_back_after_seal() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 0)).unwrap();
        t.ingest(batch(0, 0, 5_000, vec![code(0, 0, 3_000)])).unwrap();
        t.ingest(batch(1, 0, 100, vec![code(1, 0, 50)])).unwrap();
        assert_eq!(t.ready_ranges().ts, Some(100));
        t.mark_down(NodeId(1), 0, 1).unwrap();
        assert_eq!(t.ready_ranges().ts, Some(5_000));
        // Reboot: the new epoch's clock makes the node count again.
        t.announce(ClockRef { epoch: 1, mono_anchor: 6_000, real_anchor: 6_000, ..clock(1, 0) }).unwrap();
        t.ingest(Batch { epoch: 1, ..batch(1, 0, 6_500, vec![code(1, 1, 6_200)]) }).unwrap();
        assert_eq!(t.horizon(NodeId(1)), Some(6_500));
        assert_eq!(t.ingested_len(NodeId(1)), 2);
    }

    #[test]
    fn dot_has_one_row_per_node() {
        let mut t = Timeline::new(2, CS);
        t.announce(clock(0, 0)).unwrap();
        t.announce(clock(1, 0)).unwrap();
        t.ingest(batch(0, 0, 1_000, vec![ev(0, 0, 10, EventKind::PacketSend, Some(1)), code(0, 1, 20)])).unwrap();
        t.ingest(batch(1, 0, 1_000, vec![ev(1, 0, 30, EventKind::PacketRecv, Some(1))])).unwrap();
        let g = t.build_prefix_closed().unwrap();
        let dot = g.to_dot(|k| k.to_string());
        assert_eq!(dot.matches("rank=same").count(), 2);
        assert!(dot.contains("\"0.0\" -> \"1.0\" [color=blue"));
    }
}
