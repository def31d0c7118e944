//! Timeline abstractions: values accumulated over a causal graph.
//!
//! An abstraction is folded over the timeline in causal order. A node's value
//! is updated with each of its own events, and a receive first merges in the
//! value the sender had when the message left. The summary of a whole cut is
//! the join of every node's latest value, as if an extra event happened
//! causally after all of them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use serde::Serialize;
use thiserror::Error;

use crate::events::{Event, EventId, EventKind, NodeId};
use crate::timeline::TimelineGraph;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AbstractionError {
    #[error("timeline graph has a cycle through {0}")]
    Cycle(EventId),
    #[error("cross edge refers to unknown vertex {0}")]
    DanglingEdge(EventId),
    #[error("delta does not extend the abstracted cut: {0}")]
    NotExtension(String),
}

pub trait TimelineAbstraction: Clone + Default {
    /// Incorporates the next event at the node this value belongs to.
    fn update(&mut self, ev: &Event);

    /// Joins in causal information from another node. `edge` is the
    /// (send, receive) pair the information travelled over; it is `None`
    /// when forming the sink.
    fn merge(&mut self, other: &Self, edge: Option<(&Event, &Event)>);

    /// Whether `update(ev)` would leave the value unchanged. Implementations
    /// may answer `false` conservatively.
    fn absorbs(&self, _ev: &Event) -> bool {
        false
    }

    /// Whether merging `other` would leave the value unchanged. May answer
    /// `false` conservatively.
    fn covers(&self, _other: &Self) -> bool {
        false
    }
}

/// Per-node sets of event kinds and of ordered pairs `(a, b)` meaning some
/// `a` at that node happened before (or is) some `b` at the same node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventHistory {
    pub events: BTreeMap<NodeId, BTreeSet<EventKind>>,
    pub pairs: BTreeMap<NodeId, BTreeSet<(EventKind, EventKind)>>,
}

/// One element of an [`EventHistory`] viewed as a flat set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HistoryItem {
    Kind(NodeId, EventKind),
    Pair(NodeId, EventKind, EventKind),
}

impl EventHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.events.values().all(BTreeSet::is_empty)
    }

    pub fn item_count(&self) -> usize {
        self.events.values().map(BTreeSet::len).sum::<usize>()
            + self.pairs.values().map(BTreeSet::len).sum::<usize>()
    }

    pub fn items(&self) -> impl Iterator<Item = HistoryItem> + '_ {
        let kinds = self
            .events
            .iter()
            .flat_map(|(n, ks)| ks.iter().map(move |k| HistoryItem::Kind(*n, *k)));
        let pairs = self
            .pairs
            .iter()
            .flat_map(|(n, ps)| ps.iter().map(move |(a, b)| HistoryItem::Pair(*n, *a, *b)));
        kinds.chain(pairs)
    }

    pub fn has_pair(&self, node: NodeId, a: EventKind, b: EventKind) -> bool {
        self.pairs.get(&node).is_some_and(|ps| ps.contains(&(a, b)))
    }

    /// Canonical JSON: nodes ascending, kinds and pairs sorted by their
    /// textual form.
    pub fn to_canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct NodeEntry {
            node: u16,
            events: Vec<String>,
            pairs: Vec<[String; 2]>,
        }
        let nodes: BTreeSet<NodeId> = self.events.keys().chain(self.pairs.keys()).copied().collect();
        let entries: Vec<NodeEntry> = nodes
            .into_iter()
            .map(|n| {
                let mut events: Vec<String> =
                    self.events.get(&n).into_iter().flatten().map(|k| k.to_string()).collect();
                events.sort();
                let mut pairs: Vec<[String; 2]> = self
                    .pairs
                    .get(&n)
                    .into_iter()
                    .flatten()
                    .map(|(a, b)| [a.to_string(), b.to_string()])
                    .collect();
                pairs.sort();
                NodeEntry { node: n.0, events, pairs }
            })
            .collect();
        serde_json::to_string(&entries).expect("history serializes")
    }
}

impl TimelineAbstraction for EventHistory {
    fn update(&mut self, ev: &Event) {
        let kinds = self.events.entry(ev.node).or_default();
        kinds.insert(ev.kind);
        let pairs = self.pairs.entry(ev.node).or_default();
        for a in kinds.iter() {
            pairs.insert((*a, ev.kind));
        }
    }

    fn merge(&mut self, other: &Self, _edge: Option<(&Event, &Event)>) {
        for (n, ks) in &other.events {
            self.events.entry(*n).or_default().extend(ks.iter().copied());
        }
        for (n, ps) in &other.pairs {
            self.pairs.entry(*n).or_default().extend(ps.iter().copied());
        }
    }

    fn absorbs(&self, ev: &Event) -> bool {
        let Some(kinds) = self.events.get(&ev.node) else { return false };
        if !kinds.contains(&ev.kind) {
            return false;
        }
        let pairs = &self.pairs[&ev.node];
        kinds.iter().all(|a| pairs.contains(&(*a, ev.kind)))
    }

    fn covers(&self, other: &Self) -> bool {
        fn sub<T: Ord>(mine: Option<&BTreeSet<T>>, theirs: &BTreeSet<T>) -> bool {
            theirs.is_empty() || mine.is_some_and(|m| theirs.is_subset(m))
        }
        other.events.iter().all(|(n, ks)| sub(self.events.get(n), ks))
            && other.pairs.iter().all(|(n, ps)| sub(self.pairs.get(n), ps))
    }
}

/// Per-node event counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VectorClock(pub BTreeMap<NodeId, u64>);

impl VectorClock {
    pub fn get(&self, node: NodeId) -> u64 {
        self.0.get(&node).copied().unwrap_or(0)
    }

    /// Dense form over nodes `0..node_count`.
    pub fn to_vec(&self, node_count: usize) -> Vec<u64> {
        (0..node_count).map(|i| self.get(NodeId(i as u16))).collect()
    }
}

impl TimelineAbstraction for VectorClock {
    fn update(&mut self, ev: &Event) {
        *self.0.entry(ev.node).or_insert(0) += 1;
    }

    fn merge(&mut self, other: &Self, _edge: Option<(&Event, &Event)>) {
        for (n, c) in &other.0 {
            let mine = self.0.entry(*n).or_insert(0);
            *mine = (*mine).max(*c);
        }
    }

    fn covers(&self, other: &Self) -> bool {
        other.0.iter().all(|(n, c)| self.get(*n) >= *c)
    }
}

/// Folds `A` over `g` in causal order, calling `visit` with each event and
/// the value its node holds right after it. Returns the sink value.
pub fn fold_timeline<A: TimelineAbstraction>(
    g: &TimelineGraph,
    mut visit: impl FnMut(&Event, &A),
) -> Result<A, AbstractionError> {
    let index: HashMap<EventId, usize> =
        g.vertices.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut indeg = vec![0usize; g.vertices.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); g.vertices.len()];
    let mut send_of: HashMap<usize, usize> = HashMap::new();
    let lookup = |id: &EventId| index.get(id).copied().ok_or(AbstractionError::DanglingEdge(*id));
    for (a, b) in g.program_edges() {
        let (a, b) = (lookup(&a)?, lookup(&b)?);
        succ[a].push(b);
        indeg[b] += 1;
    }
    for (s, r) in &g.cross_edges {
        let (s, r) = (lookup(s)?, lookup(r)?);
        succ[s].push(r);
        indeg[r] += 1;
        send_of.insert(r, s);
    }

    let has_receive: std::collections::HashSet<usize> = send_of.values().copied().collect();
    let mut current: BTreeMap<NodeId, A> = BTreeMap::new();
    let mut at_send: HashMap<usize, A> = HashMap::new();
    let mut ready: Vec<usize> = (0..g.vertices.len()).filter(|&v| indeg[v] == 0).rev().collect();
    let mut done = 0;
    while let Some(v) = ready.pop() {
        done += 1;
        let ev = &g.vertices[v];
        let value = current.entry(ev.node).or_default();
        if let Some(s) = send_of.get(&v) {
            let sent = at_send.remove(s).expect("send folded before its receive");
            value.merge(&sent, Some((&g.vertices[*s], ev)));
        }
        value.update(ev);
        if has_receive.contains(&v) {
            at_send.insert(v, value.clone());
        }
        visit(ev, value);
        for &s in succ[v].iter().rev() {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    if done != g.vertices.len() {
        let stuck = (0..g.vertices.len()).find(|&v| indeg[v] > 0).expect("some vertex is blocked");
        return Err(AbstractionError::Cycle(g.vertices[stuck].id()));
    }
    Ok(sink(current.values()))
}

/// The value at an artificial event causally after every node's last event.
pub fn abstract_timeline<A: TimelineAbstraction>(g: &TimelineGraph) -> Result<A, AbstractionError> {
    fold_timeline(g, |_, _| {})
}

fn sink<'a, A: TimelineAbstraction + 'a>(values: impl IntoIterator<Item = &'a A>) -> A {
    let mut out = A::default();
    for v in values {
        out.merge(v, None);
    }
    out
}

/// Keeps per-node frontier values so successive slices of a growing
/// timeline can be abstracted without revisiting earlier vertices.
#[derive(Debug, Clone)]
pub struct IncrementalAbstraction<A: TimelineAbstraction> {
    current: BTreeMap<NodeId, Rc<A>>,
    tails: BTreeMap<NodeId, u64>,
    /// Values at sends whose receive has not been seen yet.
    in_flight: HashMap<EventId, (Event, Rc<A>)>,
    /// After a reset, receives of sends from before it carry no information.
    forgiving: bool,
    sink: Option<A>,
}

impl<A: TimelineAbstraction> Default for IncrementalAbstraction<A> {
    fn default() -> Self {
        IncrementalAbstraction {
            current: BTreeMap::new(),
            tails: BTreeMap::new(),
            in_flight: HashMap::new(),
            forgiving: false,
            sink: Some(A::default()),
        }
    }
}

impl<A: TimelineAbstraction> IncrementalAbstraction<A> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets everything accumulated so far. The timeline itself carries
    /// on, so later deltas are still checked against the same tails.
    pub fn reset(&mut self) {
        self.current.clear();
        self.in_flight.clear();
        self.forgiving = true;
        self.sink = Some(A::default());
    }

    /// Abstracts the next slice. `delta.vertices` must be topologically
    /// ordered, as the timeline builder emits them.
    pub fn extend(&mut self, delta: &TimelineGraph) -> Result<&A, AbstractionError> {
        let send_of: HashMap<EventId, EventId> = delta.cross_edges.iter().map(|(s, r)| (*r, *s)).collect();
        let mut tails = self.tails.clone();
        let mut sent_here: std::collections::HashSet<EventId> = std::collections::HashSet::new();
        for v in &delta.vertices {
            if tails.get(&v.node).is_some_and(|&t| t >= v.seq_in_node) {
                return Err(AbstractionError::NotExtension(format!("{} already abstracted", v.id())));
            }
            tails.insert(v.node, v.seq_in_node);
            if let Some(s) = send_of.get(&v.id()) {
                let known = self.in_flight.contains_key(s) || sent_here.contains(s);
                if !known && !self.forgiving {
                    return Err(AbstractionError::NotExtension(format!(
                        "receive {} before its send {}",
                        v.id(),
                        s
                    )));
                }
            }
            if v.kind == EventKind::PacketSend {
                sent_here.insert(v.id());
            }
        }
        for ev in &delta.vertices {
            let value = self.current.entry(ev.node).or_default();
            if let Some((send_ev, sent)) = send_of.get(&ev.id()).and_then(|s| self.in_flight.remove(s)) {
                if !value.covers(&sent) {
                    Rc::make_mut(value).merge(&sent, Some((&send_ev, ev)));
                }
            }
            if !value.absorbs(ev) {
                Rc::make_mut(value).update(ev);
            }
            if ev.kind == EventKind::PacketSend {
                self.in_flight.insert(ev.id(), (*ev, Rc::clone(value)));
            }
        }
        self.tails = tails;
        if !delta.vertices.is_empty() {
            self.sink = None;
        }
        Ok(self.sink())
    }

    pub fn node_value(&self, node: NodeId) -> Option<&A> {
        self.current.get(&node).map(Rc::as_ref)
    }

    pub fn sink(&mut self) -> &A {
        if self.sink.is_none() {
            self.sink = Some(sink(self.current.values().map(Rc::as_ref)));
        }
        self.sink.as_ref().expect("sink just computed")
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{CodeId, PacketId};

    fn ev(node: u16, seq: u64, kind: EventKind) -> Event {
        let packet = kind.is_packet().then_some(PacketId(9));
        Event { node: NodeId(node), mono_ts: seq, kind, packet, seq_in_node: seq }
    }

    const A: EventKind = EventKind::Code(CodeId(0));
    const B: EventKind = EventKind::Code(CodeId(1));

    fn set<T: Ord + Clone>(xs: &[T]) -> BTreeSet<T> {
        xs.iter().cloned().collect()
    }

    #[test]
    fn update_hand_trace() {
        let mut h = EventHistory::new();
        h.update(&ev(1, 0, A));
        assert_eq!(h.events[&NodeId(1)], set(&[A]));
        assert_eq!(h.pairs[&NodeId(1)], set(&[(A, A)]));
        h.update(&ev(1, 1, B));
        assert_eq!(h.events[&NodeId(1)], set(&[A, B]));
        assert_eq!(h.pairs[&NodeId(1)], set(&[(A, A), (A, B), (B, B)]));
        let before = h.clone();
        h.update(&ev(2, 0, A));
        assert_eq!(h.events[&NodeId(1)], before.events[&NodeId(1)]);
        assert_eq!(h.pairs[&NodeId(1)], before.pairs[&NodeId(1)]);
        assert_eq!(h.events[&NodeId(2)], set(&[A]));
        assert_eq!(h.pairs[&NodeId(2)], set(&[(A, A)]));
    }

    #[test]
    fn absorbs_matches_update() {
        let mut h = EventHistory::new();
        h.update(&ev(0, 0, A));
        h.update(&ev(0, 1, B));
        assert!(h.absorbs(&ev(0, 2, B)));
        // B after A is recorded, A after B is not.
        assert!(!h.absorbs(&ev(0, 2, A)));
        let mut g = h.clone();
        g.update(&ev(0, 2, A));
        assert!(g.absorbs(&ev(0, 3, A)));
        assert!(!h.absorbs(&ev(1, 0, A)));
    }

    #[test]
    fn merge_identity_and_idempotence() {
        let mut h = EventHistory::new();
        h.update(&ev(0, 0, A));
        h.update(&ev(3, 0, B));
        let mut m = h.clone();
        m.merge(&EventHistory::new(), None);
        assert_eq!(m, h);
        m.merge(&h, None);
        assert_eq!(m, h);
        assert!(h.covers(&h));
        assert!(h.covers(&EventHistory::new()));
        assert!(!EventHistory::new().covers(&h));
    }

    #[test]
    fn canonical_json_is_sorted() {
        let mut h = EventHistory::new();
        h.update(&ev(2, 0, EventKind::PacketSend));
        h.update(&ev(0, 0, B));
        h.update(&ev(0, 1, A));
        let json = h.to_canonical_json();
        assert_eq!(
            json,
            r#"[{"node":0,"events":["CodeEvent:0","CodeEvent:1"],"pairs":[["CodeEvent:0","CodeEvent:0"],["CodeEvent:1","CodeEvent:0"],["CodeEvent:1","CodeEvent:1"]]},{"node":2,"events":["PacketSend"],"pairs":[["PacketSend","PacketSend"]]}]"#
        );
    }

    fn two_node_graph() -> TimelineGraph {
        let s = ev(0, 1, EventKind::PacketSend);
        let r = ev(1, 1, EventKind::PacketRecv);
        TimelineGraph {
            vertices: vec![ev(0, 0, A), s, ev(1, 0, B), r, ev(1, 2, A)],
            cross_edges: vec![(s.id(), r.id())],
            to_infinity: vec![],
        }
    }

    #[test]
    fn empty_graph_gives_initial_value() {
        let g = TimelineGraph::default();
        assert_eq!(abstract_timeline::<EventHistory>(&g).unwrap(), EventHistory::new());
        assert_eq!(abstract_timeline::<VectorClock>(&g).unwrap(), VectorClock::default());
    }

    #[test]
    fn vector_clock_sink_counts_events() {
        let vc: VectorClock = abstract_timeline(&two_node_graph()).unwrap();
        assert_eq!(vc.to_vec(2), vec![2, 3]);
    }

    #[test]
    fn receive_carries_sender_history() {
        let mut seen = Vec::new();
        let h: EventHistory = fold_timeline(&two_node_graph(), |e, v: &EventHistory| {
            if e.node == NodeId(1) && e.seq_in_node == 2 {
                seen.push(v.clone());
            }
        })
        .unwrap();
        let at_end = &seen[0];
        // Node 0's history reached node 1 through the message.
        assert!(at_end.has_pair(NodeId(0), A, EventKind::PacketSend));
        assert!(at_end.has_pair(NodeId(1), B, A));
        assert!(at_end.has_pair(NodeId(1), EventKind::PacketRecv, A));
        assert_eq!(&h, at_end);
    }

    #[test]
    fn cycle_is_reported() {
        let s = ev(0, 1, EventKind::PacketSend);
        let r = ev(1, 0, EventKind::PacketRecv);
        let s2 = ev(1, 1, EventKind::PacketSend);
        let r2 = ev(0, 0, EventKind::PacketRecv);
        let g = TimelineGraph {
            vertices: vec![r2, s, r, s2],
            cross_edges: vec![(s.id(), r.id()), (s2.id(), r2.id())],
            to_infinity: vec![],
        };
        assert!(matches!(abstract_timeline::<EventHistory>(&g), Err(AbstractionError::Cycle(_))));
    }

    #[test]
    fn incremental_split_matches_single_pass() {
        let g = two_node_graph();
        let whole: EventHistory = abstract_timeline(&g).unwrap();
        let (first, second) = (
            TimelineGraph { vertices: g.vertices[..2].to_vec(), cross_edges: vec![], to_infinity: vec![g.vertices[1].id()] },
            TimelineGraph { vertices: g.vertices[2..].to_vec(), cross_edges: g.cross_edges.clone(), to_infinity: vec![] },
        );
        let mut inc = IncrementalAbstraction::<EventHistory>::new();
        inc.extend(&first).unwrap();
        let before = inc.sink().clone();
        assert_eq!(inc.extend(&TimelineGraph::default()).unwrap(), &before);
        assert_eq!(inc.extend(&second).unwrap(), &whole);
        assert_eq!(inc.in_flight_len(), 0);
        assert!(matches!(inc.extend(&second), Err(AbstractionError::NotExtension(_))));
    }

    #[test]
    fn incremental_rejects_receive_without_send() {
        let g = two_node_graph();
        let late = TimelineGraph { vertices: g.vertices[2..].to_vec(), cross_edges: g.cross_edges.clone(), to_infinity: vec![] };
        let mut inc = IncrementalAbstraction::<EventHistory>::new();
        assert!(matches!(inc.extend(&late), Err(AbstractionError::NotExtension(_))));
        // After a reset the missing sender information is simply dropped.
        inc.reset();
        let h = inc.extend(&late).unwrap().clone();
        assert!(!h.events.contains_key(&NodeId(0)));
        assert!(h.has_pair(NodeId(1), B, EventKind::PacketRecv));
    }
}
