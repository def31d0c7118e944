//! Deterministic discrete-event cluster simulator.
//!
//! Virtual nodes run a [`Process`] state machine. The simulator owns time,
//! message transport, per-node clocks, observers, and the client session, and
//! it enacts nemesis faults between windows. Everything random comes from
//! seeded ChaCha streams and every queue is keyed by `(time, tiebreak)`, so a
//! run is a pure function of its configuration, its seed, and the faults
//! enacted.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{
    make_packet_id, op_label, ClockRef, CodeId, Event, EventKind, Nanos, NodeId, OpLabel, PacketId,
};
use crate::observer::Observer;

/// Offset added to simulated time to produce wall-clock readings.
pub const REAL_EPOCH_NS: Nanos = 1_700_000_000_000_000_000;
/// Messages a paused node buffers before it starts dropping them.
pub const PAUSE_QUEUE_BOUND: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("fault target {target} is outside the cluster of {nodes} nodes")]
    BadTarget { target: NodeId, nodes: usize },
    #[error("fault {0} requires a target node")]
    MissingTarget(FaultTag),
    #[error("window duration must be positive")]
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub node_count: usize,
    pub rng_seed: u64,
    pub min_latency_ns: Nanos,
    pub max_latency_ns: Nanos,
    pub skew_bound_ns: Nanos,
    pub batch_interval_ns: Nanos,
    pub client_timeout_ns: Nanos,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            node_count: 5,
            rng_seed: 0,
            min_latency_ns: 1_000_000,
            max_latency_ns: 5_000_000,
            skew_bound_ns: 100_000_000,
            batch_interval_ns: 100_000_000,
            client_timeout_ns: 1_000_000_000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.node_count < 3 {
            return Err(SimError::Config("node_count must be at least 3".into()));
        }
        if self.node_count > usize::from(u16::MAX) {
            return Err(SimError::Config("node_count does not fit a node id".into()));
        }
        if self.min_latency_ns > self.max_latency_ns {
            return Err(SimError::Config("min_latency_ns exceeds max_latency_ns".into()));
        }
        if self.skew_bound_ns == 0 {
            return Err(SimError::Config("skew_bound_ns must be positive".into()));
        }
        if self.batch_interval_ns == 0 {
            return Err(SimError::Config("batch_interval_ns must be positive".into()));
        }
        if self.client_timeout_ns == 0 {
            return Err(SimError::Config("client_timeout_ns must be positive".into()));
        }
        Ok(())
    }
}

/// Kinds of fault the nemesis can enact. One Q-table column per tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultTag {
    PartitionRandomHalves,
    HealNetwork,
    CrashNode,
    RestartNode,
    PauseNode,
    ResumeNode,
    IsolateNode,
    RequestMembershipChange,
    NoOp,
}

impl FaultTag {
    pub const ALL: [FaultTag; 9] = [
        FaultTag::PartitionRandomHalves,
        FaultTag::HealNetwork,
        FaultTag::CrashNode,
        FaultTag::RestartNode,
        FaultTag::PauseNode,
        FaultTag::ResumeNode,
        FaultTag::IsolateNode,
        FaultTag::RequestMembershipChange,
        FaultTag::NoOp,
    ];

    pub fn needs_target(self) -> bool {
        matches!(
            self,
            FaultTag::CrashNode
                | FaultTag::RestartNode
                | FaultTag::PauseNode
                | FaultTag::ResumeNode
                | FaultTag::IsolateNode
                | FaultTag::RequestMembershipChange
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultTag::PartitionRandomHalves => "PartitionRandomHalves",
            FaultTag::HealNetwork => "HealNetwork",
            FaultTag::CrashNode => "CrashNode",
            FaultTag::RestartNode => "RestartNode",
            FaultTag::PauseNode => "PauseNode",
            FaultTag::ResumeNode => "ResumeNode",
            FaultTag::IsolateNode => "IsolateNode",
            FaultTag::RequestMembershipChange => "RequestMembershipChange",
            FaultTag::NoOp => "NoOp",
        }
    }
}

impl fmt::Display for FaultTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FaultTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown fault {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultAction {
    pub tag: FaultTag,
    pub target: Option<NodeId>,
}

impl FaultAction {
    pub fn untargeted(tag: FaultTag) -> Self {
        FaultAction { tag, target: None }
    }

    pub fn on(tag: FaultTag, node: NodeId) -> Self {
        FaultAction { tag, target: Some(node) }
    }
}

impl fmt::Display for FaultAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target {
            Some(t) => write!(f, "{}({})", self.tag, t),
            None => write!(f, "{}", self.tag),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Running,
    Crashed,
    Paused,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkState {
    reachability: Vec<Vec<bool>>,
    node_status: Vec<NodeStatus>,
}

impl NetworkState {
    pub fn healthy(n: usize) -> Self {
        NetworkState {
            reachability: vec![vec![true; n]; n],
            node_status: vec![NodeStatus::Running; n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_status.len()
    }

    pub fn reachable(&self, a: NodeId, b: NodeId) -> bool {
        self.reachability[a.index()][b.index()]
    }

    pub fn status(&self, n: NodeId) -> NodeStatus {
        self.node_status[n.index()]
    }

    pub fn statuses(&self) -> &[NodeStatus] {
        &self.node_status
    }

    pub fn fully_connected(&self) -> bool {
        self.reachability.iter().all(|row| row.iter().all(|&r| r))
    }

    pub fn nodes_with(&self, status: NodeStatus) -> Vec<NodeId> {
        self.node_status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == status)
            .map(|(i, _)| NodeId(i as u16))
            .collect()
    }

    fn heal(&mut self) {
        for row in &mut self.reachability {
            row.fill(true);
        }
    }

    fn split(&mut self, side_of: impl Fn(usize) -> u32) {
        let n = self.node_count();
        for i in 0..n {
            for j in 0..n {
                self.reachability[i][j] = side_of(i) == side_of(j);
            }
        }
    }

    /// Connected groups of nodes, each sorted, ordered by smallest member.
    pub fn partition_sets(&self) -> Vec<Vec<NodeId>> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for i in 0..n {
            if seen[i] {
                continue;
            }
            let group: Vec<NodeId> = (0..n)
                .filter(|&j| self.reachability[i][j])
                .map(|j| NodeId(j as u16))
                .collect();
            for g in &group {
                seen[g.index()] = true;
            }
            out.push(group);
        }
        out
    }
}

/// Audit record of one enacted fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLogEntry {
    pub time: Nanos,
    pub fault: FaultTag,
    pub target: Option<NodeId>,
    pub partition: Vec<Vec<NodeId>>,
    pub status: Vec<NodeStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientOp {
    Write { key: u32, value: u64 },
    Read { key: u32 },
    RemoveNode(NodeId),
}

impl ClientOp {
    pub fn name(&self) -> &'static str {
        match self {
            ClientOp::Write { .. } => "write",
            ClientOp::Read { .. } => "read",
            ClientOp::RemoveNode(_) => "remove",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientOutcome {
    /// Completed; reads carry the value observed.
    Ok(Option<u64>),
    /// Definitely rejected by the SUT.
    Fail,
    /// No answer before the client gave up.
    Timeout,
}

impl ClientOutcome {
    fn suffix(&self) -> &'static str {
        match self {
            ClientOutcome::Ok(_) => "ok",
            ClientOutcome::Fail => "fail",
            ClientOutcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub id: u64,
    pub op: ClientOp,
}

/// One operation of the single client session, from invocation to outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientOpRecord {
    pub id: u64,
    pub op: ClientOp,
    pub target: Option<NodeId>,
    pub invoked_at: Nanos,
    pub completed_at: Option<Nanos>,
    pub outcome: Option<ClientOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub node: NodeId,
    pub at: Nanos,
    pub text: String,
}

/// A failed internal assertion inside the SUT. The node aborts right after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionReport {
    pub node: NodeId,
    pub at: Nanos,
    pub message: String,
}

/// What observers hand over to the mediator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObserverReport {
    Clock(ClockRef),
    Batch(crate::events::Batch),
    /// The node's observer died with it after producing `batches` batches in
    /// `epoch`.
    Down { node: NodeId, epoch: u32, batches: u64 },
}

pub type TimerKey = u32;

enum Effect<M> {
    Send(NodeId, M),
    Code(CodeId),
    Log(String),
    Respond(u64, ClientOutcome),
    SetTimer(TimerKey, Nanos),
    CancelTimer(TimerKey),
    Abort(String),
}

/// Handle a process uses to act on the world. Effects are applied in the
/// order they were requested once the handler returns.
pub struct Ctx<'a, M> {
    node: NodeId,
    now: Nanos,
    rng: &'a mut ChaCha8Rng,
    effects: Vec<Effect<M>>,
}

impl<'a, M> Ctx<'a, M> {
    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Monotonic time at this node.
    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.effects.push(Effect::Send(to, msg));
    }

    pub fn emit(&mut self, code: CodeId) {
        self.effects.push(Effect::Code(code));
    }

    pub fn log(&mut self, text: impl Into<String>) {
        self.effects.push(Effect::Log(text.into()));
    }

    pub fn respond(&mut self, request: u64, outcome: ClientOutcome) {
        self.effects.push(Effect::Respond(request, outcome));
    }

    /// Arms (or re-arms) the timer `key` to fire after `delay` ns.
    pub fn set_timer(&mut self, key: TimerKey, delay: Nanos) {
        self.effects.push(Effect::SetTimer(key, delay));
    }

    pub fn cancel_timer(&mut self, key: TimerKey) {
        self.effects.push(Effect::CancelTimer(key));
    }

    /// Fails an internal assertion: the node aborts after this handler.
    pub fn abort(&mut self, message: impl Into<String>) {
        self.effects.push(Effect::Abort(message.into()));
    }
}

/// Sends and code events one handler call produced, for driving a process
/// by hand outside a simulator.
#[cfg(test)]
pub(crate) fn capture<M>(
    node: NodeId,
    now: Nanos,
    f: impl FnOnce(&mut Ctx<'_, M>),
) -> (Vec<(NodeId, M)>, Vec<CodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx { node, now, rng: &mut rng, effects: Vec::new() };
    f(&mut ctx);
    let (mut sends, mut codes) = (Vec::new(), Vec::new());
    for e in ctx.effects {
        match e {
            Effect::Send(to, m) => sends.push((to, m)),
            Effect::Code(c) => codes.push(c),
            _ => {}
        }
    }
    (sends, codes)
}

/// A node state machine driven by the simulator.
pub trait Process {
    type Msg: Clone + fmt::Debug;

    /// Runs on first start and after every restart. Persistent state is
    /// whatever survived [`Process::on_crash`].
    fn on_boot(&mut self, ctx: &mut Ctx<'_, Self::Msg>);
    fn on_timer(&mut self, key: TimerKey, ctx: &mut Ctx<'_, Self::Msg>);
    fn on_message(&mut self, from: NodeId, msg: Self::Msg, ctx: &mut Ctx<'_, Self::Msg>);
    fn on_client(&mut self, req: ClientRequest, ctx: &mut Ctx<'_, Self::Msg>);
    /// Drops volatile state.
    fn on_crash(&mut self);
    /// Whether the node currently believes it leads (used for client routing).
    fn is_leader(&self) -> bool;
}

enum Item<M> {
    Deliver { src: NodeId, dst: NodeId, packet: PacketId, msg: M },
    Timer { node: NodeId, key: TimerKey, generation: u64, incarnation: u64 },
    Flush,
    Submit(ClientRequest),
    ClientTimeout(u64),
}

struct Scheduled<M> {
    at: Nanos,
    tiebreak: u64,
    item: Item<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.tiebreak) == (other.at, other.tiebreak)
    }
}
impl<M> Eq for Scheduled<M> {}
impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Scheduled<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; earliest first.
        (other.at, other.tiebreak).cmp(&(self.at, self.tiebreak))
    }
}

struct Slot<P: Process> {
    process: P,
    incarnation: u64,
    clock_offset: Nanos,
    observer: Observer,
    next_event_seq: u64,
    next_send_seq: u64,
    timers: BTreeMap<TimerKey, u64>,
    paused_timers: Vec<TimerKey>,
    paused_inbox: VecDeque<(NodeId, PacketId, P::Msg)>,
    rng: ChaCha8Rng,
}

pub struct Simulator<P: Process> {
    cfg: SimConfig,
    now: Nanos,
    tiebreak: u64,
    queue: BinaryHeap<Scheduled<P::Msg>>,
    slots: Vec<Slot<P>>,
    net: NetworkState,
    rng: ChaCha8Rng,
    window_events: Vec<Event>,
    reports: Vec<ObserverReport>,
    logs: Vec<LogLine>,
    assertions: Vec<AssertionReport>,
    netlog: Vec<NetLogEntry>,
    client_ops: Vec<ClientOpRecord>,
    open_ops: BTreeMap<u64, usize>,
    next_request: u64,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    crate::events::mix64(seed ^ crate::events::mix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

impl<P: Process> Simulator<P> {
    /// Builds the cluster and boots every node at time zero.
    pub fn new(cfg: SimConfig, mut make: impl FnMut(NodeId) -> P) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, 0));
        let slots = (0..cfg.node_count)
            .map(|i| {
                let node = NodeId(i as u16);
                Slot {
                    process: make(node),
                    incarnation: 0,
                    clock_offset: rng.gen_range(0..=cfg.skew_bound_ns),
                    observer: Observer::new(node, cfg.skew_bound_ns),
                    next_event_seq: 0,
                    next_send_seq: 0,
                    timers: BTreeMap::new(),
                    paused_timers: Vec::new(),
                    paused_inbox: VecDeque::new(),
                    rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, 1 + i as u64)),
                }
            })
            .collect();
        let mut sim = Simulator {
            net: NetworkState::healthy(cfg.node_count),
            cfg,
            now: 0,
            tiebreak: 0,
            queue: BinaryHeap::new(),
            slots,
            rng,
            window_events: Vec::new(),
            reports: Vec::new(),
            logs: Vec::new(),
            assertions: Vec::new(),
            netlog: Vec::new(),
            client_ops: Vec::new(),
            open_ops: BTreeMap::new(),
            next_request: 0,
        };
        sim.schedule(sim.cfg.batch_interval_ns, Item::Flush);
        for i in 0..sim.cfg.node_count {
            sim.boot(NodeId(i as u16));
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Current simulated time (also every node's monotonic clock reading).
    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn network(&self) -> &NetworkState {
        &self.net
    }

    pub fn process(&self, node: NodeId) -> &P {
        &self.slots[node.index()].process
    }

    pub fn real_time(&self, node: NodeId) -> Nanos {
        REAL_EPOCH_NS + self.now + self.slots[node.index()].clock_offset
    }

    /// Constant wall-clock offset of each node.
    pub fn clock_offsets(&self) -> Vec<Nanos> {
        self.slots.iter().map(|s| s.clock_offset).collect()
    }

    pub fn take_reports(&mut self) -> Vec<ObserverReport> {
        std::mem::take(&mut self.reports)
    }

    pub fn take_logs(&mut self) -> Vec<LogLine> {
        std::mem::take(&mut self.logs)
    }

    pub fn take_assertions(&mut self) -> Vec<AssertionReport> {
        std::mem::take(&mut self.assertions)
    }

    pub fn take_netlog(&mut self) -> Vec<NetLogEntry> {
        std::mem::take(&mut self.netlog)
    }

    pub fn client_history(&self) -> &[ClientOpRecord] {
        &self.client_ops
    }

    fn schedule(&mut self, at: Nanos, item: Item<P::Msg>) {
        self.tiebreak += 1;
        self.queue.push(Scheduled { at, tiebreak: self.tiebreak, item });
    }

    fn record(&mut self, node: NodeId, kind: EventKind, packet: Option<PacketId>) {
        let slot = &mut self.slots[node.index()];
        if !slot.observer.is_alive() {
            return;
        }
        let ev = Event { node, mono_ts: self.now, kind, packet, seq_in_node: slot.next_event_seq };
        if slot.observer.record(ev) {
            slot.next_event_seq += 1;
            self.window_events.push(ev);
        }
    }

    fn boot(&mut self, node: NodeId) {
        let real = self.real_time(node);
        let slot = &mut self.slots[node.index()];
        slot.observer.boot(self.now, real);
        let clock = slot.observer.announce_clock().expect("fresh boot announces once");
        self.reports.push(ObserverReport::Clock(clock));
        self.net.node_status[node.index()] = NodeStatus::Running;
        self.dispatch(node, |p, ctx| p.on_boot(ctx));
    }

    fn crash(&mut self, node: NodeId) {
        if self.net.status(node) == NodeStatus::Crashed {
            return;
        }
        let now = self.now;
        let slot = &mut self.slots[node.index()];
        let epoch = slot.observer.epoch();
        let (last, batches) = slot.observer.shutdown(now).expect("live node has a live observer");
        slot.incarnation += 1;
        slot.timers.clear();
        slot.paused_timers.clear();
        slot.paused_inbox.clear();
        slot.process.on_crash();
        self.reports.push(ObserverReport::Batch(last));
        self.reports.push(ObserverReport::Down { node, epoch, batches });
        self.net.node_status[node.index()] = NodeStatus::Crashed;
    }

    /// Runs `f` against a running node's process and applies its effects.
    fn dispatch(&mut self, node: NodeId, f: impl FnOnce(&mut P, &mut Ctx<'_, P::Msg>)) {
        let now = self.now;
        let slot = &mut self.slots[node.index()];
        let mut ctx = Ctx { node, now, rng: &mut slot.rng, effects: Vec::new() };
        f(&mut slot.process, &mut ctx);
        let effects = ctx.effects;
        for effect in effects {
            match effect {
                Effect::Send(dst, msg) => {
                    if dst == node || dst.index() >= self.slots.len() {
                        continue;
                    }
                    let slot = &mut self.slots[node.index()];
                    let packet = make_packet_id(node, dst, slot.next_send_seq);
                    slot.next_send_seq += 1;
                    self.record(node, EventKind::PacketSend, Some(packet));
                    let latency =
                        self.rng.gen_range(self.cfg.min_latency_ns..=self.cfg.max_latency_ns);
                    self.schedule(now + latency, Item::Deliver { src: node, dst, packet, msg });
                }
                Effect::Code(code) => self.record(node, EventKind::Code(code), None),
                Effect::Log(text) => self.logs.push(LogLine { node, at: now, text }),
                Effect::Respond(id, outcome) => self.complete_op(id, outcome),
                Effect::SetTimer(key, delay) => {
                    let slot = &mut self.slots[node.index()];
                    let generation = slot.timers.entry(key).or_insert(0);
                    *generation += 1;
                    let item = Item::Timer {
                        node,
                        key,
                        generation: *generation,
                        incarnation: slot.incarnation,
                    };
                    self.schedule(now + delay, item);
                }
                Effect::CancelTimer(key) => {
                    if let Some(g) = self.slots[node.index()].timers.get_mut(&key) {
                        *g += 1;
                    }
                }
                Effect::Abort(message) => {
                    self.assertions.push(AssertionReport { node, at: now, message });
                    self.crash(node);
                    return;
                }
            }
        }
    }

    fn complete_op(&mut self, id: u64, outcome: ClientOutcome) {
        let Some(idx) = self.open_ops.remove(&id) else { return };
        let now = self.now;
        let rec = &mut self.client_ops[idx];
        rec.completed_at = Some(now);
        rec.outcome = Some(outcome);
        let (op, target) = (rec.op, rec.target);
        if let Some(t) = target {
            if self.net.status(t) == NodeStatus::Running {
                let label = response_label(op, outcome);
                self.record(t, EventKind::ClientResponse(label), None);
            }
        }
    }

    /// Queues a client operation for submission at absolute time `at`.
    pub fn submit_at(&mut self, at: Nanos, op: ClientOp) -> u64 {
        let id = self.next_request;
        self.next_request += 1;
        self.schedule(at.max(self.now), Item::Submit(ClientRequest { id, op }));
        id
    }

    fn submit(&mut self, req: ClientRequest) {
        let running = self.net.nodes_with(NodeStatus::Running);
        let leaders: Vec<NodeId> =
            running.iter().copied().filter(|n| self.process(*n).is_leader()).collect();
        let target = if !leaders.is_empty() {
            leaders.choose(&mut self.rng).copied()
        } else {
            running.choose(&mut self.rng).copied()
        };
        let idx = self.client_ops.len();
        self.client_ops.push(ClientOpRecord {
            id: req.id,
            op: req.op,
            target,
            invoked_at: self.now,
            completed_at: None,
            outcome: None,
        });
        self.open_ops.insert(req.id, idx);
        self.schedule(self.now + self.cfg.client_timeout_ns, Item::ClientTimeout(req.id));
        if let Some(t) = target {
            let label = op_label(req.op.name()).expect("short label");
            self.record(t, EventKind::ClientRequest(label), None);
            self.dispatch(t, |p, ctx| p.on_client(req, ctx));
        }
    }

    fn step(&mut self, s: Scheduled<P::Msg>) {
        self.now = s.at;
        match s.item {
            Item::Flush => {
                for i in 0..self.slots.len() {
                    let slot = &mut self.slots[i];
                    if slot.observer.is_alive() {
                        let b = slot.observer.flush(self.now).expect("alive observer flushes");
                        self.reports.push(ObserverReport::Batch(b));
                    }
                }
                self.schedule(self.now + self.cfg.batch_interval_ns, Item::Flush);
            }
            Item::Deliver { src, dst, packet, msg } => match self.net.status(dst) {
                NodeStatus::Crashed => {}
                _ if !self.net.reachable(src, dst) => {}
                NodeStatus::Paused => {
                    let inbox = &mut self.slots[dst.index()].paused_inbox;
                    if inbox.len() < PAUSE_QUEUE_BOUND {
                        inbox.push_back((src, packet, msg));
                    }
                }
                NodeStatus::Running => self.deliver(src, dst, packet, msg),
            },
            Item::Timer { node, key, generation, incarnation } => {
                let slot = &self.slots[node.index()];
                if slot.incarnation != incarnation || slot.timers.get(&key) != Some(&generation) {
                    return;
                }
                match self.net.status(node) {
                    NodeStatus::Running => self.dispatch(node, |p, ctx| p.on_timer(key, ctx)),
                    NodeStatus::Paused => self.slots[node.index()].paused_timers.push(key),
                    NodeStatus::Crashed => {}
                }
            }
            Item::Submit(req) => self.submit(req),
            Item::ClientTimeout(id) => self.complete_op(id, ClientOutcome::Timeout),
        }
    }

    fn deliver(&mut self, src: NodeId, dst: NodeId, packet: PacketId, msg: P::Msg) {
        self.record(dst, EventKind::PacketRecv, Some(packet));
        self.dispatch(dst, |p, ctx| p.on_message(src, msg, ctx));
    }

    /// Advances simulated time by `duration_ns` and returns the events
    /// observed meanwhile, in processing order.
    pub fn run_window(&mut self, duration_ns: Nanos) -> Result<Vec<Event>, SimError> {
        if duration_ns == 0 {
            return Err(SimError::EmptyWindow);
        }
        let end = self.now + duration_ns;
        while self.queue.peek().is_some_and(|s| s.at <= end) {
            let s = self.queue.pop().expect("peeked");
            self.step(s);
        }
        self.now = end;
        Ok(std::mem::take(&mut self.window_events))
    }

    fn check_target(&self, fault: FaultAction) -> Result<Option<NodeId>, SimError> {
        match fault.target {
            Some(t) if t.index() >= self.slots.len() => {
                Err(SimError::BadTarget { target: t, nodes: self.slots.len() })
            }
            None if fault.tag.needs_target() => Err(SimError::MissingTarget(fault.tag)),
            t => Ok(t),
        }
    }

    /// Applies a nemesis fault at the current instant.
    pub fn enact(&mut self, fault: FaultAction) -> Result<&NetworkState, SimError> {
        let target = self.check_target(fault)?;
        match fault.tag {
            FaultTag::PartitionRandomHalves => {
                let n = self.slots.len();
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                let mut side = vec![1u32; n];
                for &i in &order[..n / 2] {
                    side[i] = 0;
                }
                self.net.split(|i| side[i]);
            }
            FaultTag::HealNetwork => self.net.heal(),
            FaultTag::IsolateNode => {
                let t = target.expect("checked").index();
                self.net.split(|i| u32::from(i == t));
            }
            FaultTag::CrashNode => self.crash(target.expect("checked")),
            FaultTag::RestartNode => {
                let t = target.expect("checked");
                if self.net.status(t) == NodeStatus::Crashed {
                    self.boot(t);
                }
            }
            FaultTag::PauseNode => {
                let t = target.expect("checked");
                if self.net.status(t) == NodeStatus::Running {
                    self.net.node_status[t.index()] = NodeStatus::Paused;
                }
            }
            FaultTag::ResumeNode => {
                let t = target.expect("checked");
                if self.net.status(t) == NodeStatus::Paused {
                    self.resume(t);
                }
            }
            FaultTag::RequestMembershipChange => {
                let t = target.expect("checked");
                self.submit_at(self.now, ClientOp::RemoveNode(t));
            }
            FaultTag::NoOp => {}
        }
        self.netlog.push(NetLogEntry {
            time: self.now,
            fault: fault.tag,
            target,
            partition: self.net.partition_sets(),
            status: self.net.node_status.clone(),
        });
        Ok(&self.net)
    }

    /// Installs an explicit partition for scripted scenarios. Nodes missing
    /// from every group end up alone. Not part of the nemesis alphabet.
    pub fn set_partition(&mut self, groups: &[&[NodeId]]) {
        let n = self.slots.len();
        let mut side: Vec<u32> = (0..n as u32).map(|i| groups.len() as u32 + i).collect();
        for (g, members) in groups.iter().enumerate() {
            for m in members.iter() {
                side[m.index()] = g as u32;
            }
        }
        self.net.split(|i| side[i]);
    }

    fn resume(&mut self, node: NodeId) {
        self.net.node_status[node.index()] = NodeStatus::Running;
        let timers = std::mem::take(&mut self.slots[node.index()].paused_timers);
        for key in timers {
            if self.net.status(node) != NodeStatus::Running {
                return;
            }
            self.dispatch(node, |p, ctx| p.on_timer(key, ctx));
        }
        while let Some((src, packet, msg)) = self.slots[node.index()].paused_inbox.pop_front() {
            if self.net.status(node) != NodeStatus::Running {
                return;
            }
            self.deliver(src, node, packet, msg);
        }
    }
}

pub fn response_label(op: ClientOp, outcome: ClientOutcome) -> OpLabel {
    op_label(&format!("{}:{}", op.name(), outcome.suffix())).expect("short label")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Echo process: pings node 0 on every timer tick and counts messages.
    #[derive(Debug, Default)]
    struct Pinger {
        received: Vec<(NodeId, u32)>,
        ticks: u32,
        leader: bool,
    }

    impl Process for Pinger {
        type Msg = u32;

        fn on_boot(&mut self, ctx: &mut Ctx<'_, u32>) {
            ctx.set_timer(0, 10_000_000);
        }

        fn on_timer(&mut self, _key: TimerKey, ctx: &mut Ctx<'_, u32>) {
            self.ticks += 1;
            ctx.emit(CodeId(7));
            ctx.set_timer(0, 10_000_000);
        }

        fn on_message(&mut self, from: NodeId, msg: u32, _ctx: &mut Ctx<'_, u32>) {
            self.received.push((from, msg));
        }

        fn on_client(&mut self, req: ClientRequest, ctx: &mut Ctx<'_, u32>) {
            if self.leader {
                ctx.respond(req.id, ClientOutcome::Ok(None));
            }
        }

        fn on_crash(&mut self) {
            self.received.clear();
        }

        fn is_leader(&self) -> bool {
            self.leader
        }
    }

    /// Sends scripted messages from its boot hook.
    #[derive(Debug, Default)]
    struct Scripted {
        outbox: Vec<(NodeId, u32)>,
        got: Vec<u32>,
    }

    impl Process for Scripted {
        type Msg = u32;
        fn on_boot(&mut self, ctx: &mut Ctx<'_, u32>) {
            for (to, m) in self.outbox.drain(..) {
                ctx.send(to, m);
            }
        }
        fn on_timer(&mut self, _: TimerKey, _: &mut Ctx<'_, u32>) {}
        fn on_message(&mut self, _: NodeId, msg: u32, _: &mut Ctx<'_, u32>) {
            self.got.push(msg);
        }
        fn on_client(&mut self, _: ClientRequest, _: &mut Ctx<'_, u32>) {}
        fn on_crash(&mut self) {}
        fn is_leader(&self) -> bool {
            false
        }
    }

    fn cfg(seed: u64) -> SimConfig {
        SimConfig { rng_seed: seed, ..SimConfig::default() }
    }

    fn scripted(outbox: Vec<(NodeId, u32)>, cfg: SimConfig) -> Simulator<Scripted> {
        Simulator::new(cfg, |n| Scripted {
            outbox: if n == NodeId(0) { outbox.clone() } else { vec![] },
            got: vec![],
        })
        .unwrap()
    }

    #[test]
    fn rejects_small_clusters_and_bad_latency() {
        let bad = SimConfig { node_count: 2, ..SimConfig::default() };
        assert!(Simulator::new(bad, |_| Pinger::default()).is_err());
        let bad = SimConfig { min_latency_ns: 9, max_latency_ns: 3, ..SimConfig::default() };
        assert!(Simulator::new(bad, |_| Pinger::default()).is_err());
    }

    #[test]
    fn happy_path_send_and_receive_share_packet_id() {
        let mut sim = scripted(vec![(NodeId(1), 42)], cfg(1));
        let evs = sim.run_window(50_000_000).unwrap();
        let sends: Vec<_> = evs.iter().filter(|e| e.kind == EventKind::PacketSend).collect();
        let recvs: Vec<_> = evs.iter().filter(|e| e.kind == EventKind::PacketRecv).collect();
        assert_eq!((sends.len(), recvs.len()), (1, 1));
        assert_eq!(sends[0].packet, recvs[0].packet);
        assert_eq!(sends[0].node, NodeId(0));
        assert_eq!(recvs[0].node, NodeId(1));
        assert!(sends[0].mono_ts < recvs[0].mono_ts);
        assert_eq!(sim.process(NodeId(1)).got, vec![42]);
    }

    #[test]
    fn crashed_destination_never_receives() {
        let mut sim = scripted(vec![(NodeId(2), 1)], cfg(2));
        sim.enact(FaultAction::on(FaultTag::CrashNode, NodeId(2))).unwrap();
        let evs = sim.run_window(50_000_000).unwrap();
        assert!(evs.iter().any(|e| e.kind == EventKind::PacketSend));
        assert!(!evs.iter().any(|e| e.kind == EventKind::PacketRecv));
        assert!(sim.process(NodeId(2)).got.is_empty());
    }

    #[test]
    fn equal_latency_messages_arrive_in_send_order() {
        let c = SimConfig { min_latency_ns: 3_000_000, max_latency_ns: 3_000_000, ..cfg(3) };
        let mut sim = scripted((0..20).map(|m| (NodeId(1), m)).collect(), c);
        sim.run_window(10_000_000).unwrap();
        assert_eq!(sim.process(NodeId(1)).got, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn heal_restores_full_reachability() {
        let mut sim = Simulator::new(cfg(4), |_| Pinger::default()).unwrap();
        sim.enact(FaultAction::untargeted(FaultTag::PartitionRandomHalves)).unwrap();
        assert!(!sim.network().fully_connected());
        sim.enact(FaultAction::on(FaultTag::IsolateNode, NodeId(3))).unwrap();
        let st = sim.enact(FaultAction::untargeted(FaultTag::HealNetwork)).unwrap();
        assert!(st.fully_connected());
    }

    #[test]
    fn partition_halves_are_seeded_and_non_empty() {
        let split = |seed| {
            let mut sim = Simulator::new(cfg(seed), |_| Pinger::default()).unwrap();
            sim.enact(FaultAction::untargeted(FaultTag::PartitionRandomHalves)).unwrap();
            sim.network().partition_sets()
        };
        let a = split(11);
        assert_eq!(a, split(11));
        assert_eq!(a.len(), 2);
        let mut sizes: Vec<_> = a.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 3]);
        // Different seeds eventually produce different bisections.
        assert!((12..40).any(|s| split(s) != a));
    }

    #[test]
    fn partition_blocks_cross_traffic() {
        let mut sim = Simulator::new(cfg(5), |_| Pinger::default()).unwrap();
        sim.enact(FaultAction::on(FaultTag::IsolateNode, NodeId(0))).unwrap();
        let mut s2 = scripted((1..5).map(|d| (NodeId(d), 9)).collect(), cfg(5));
        s2.enact(FaultAction::on(FaultTag::IsolateNode, NodeId(0))).unwrap();
        let evs = s2.run_window(100_000_000).unwrap();
        assert_eq!(evs.iter().filter(|e| e.kind == EventKind::PacketSend).count(), 4);
        assert_eq!(evs.iter().filter(|e| e.kind == EventKind::PacketRecv).count(), 0);
    }

    #[test]
    fn bad_target_is_rejected() {
        let mut sim = Simulator::new(cfg(6), |_| Pinger::default()).unwrap();
        let err = sim.enact(FaultAction::on(FaultTag::CrashNode, NodeId(9))).unwrap_err();
        assert!(matches!(err, SimError::BadTarget { .. }));
        assert!(matches!(
            sim.enact(FaultAction::untargeted(FaultTag::CrashNode)),
            Err(SimError::MissingTarget(_))
        ));
    }

    #[test]
    fn quiescent_window_has_only_timer_events() {
        let mut sim = Simulator::new(cfg(7), |_| Pinger::default()).unwrap();
        let evs = sim.run_window(100_000_000).unwrap();
        assert!(!evs.is_empty());
        assert!(evs.iter().all(|e| e.kind == EventKind::Code(CodeId(7))));
    }

    #[test]
    fn paused_node_skips_timers_until_resumed() {
        let mut sim = Simulator::new(cfg(8), |_| Pinger::default()).unwrap();
        sim.enact(FaultAction::on(FaultTag::PauseNode, NodeId(1))).unwrap();
        let evs = sim.run_window(200_000_000).unwrap();
        assert!(!evs.iter().any(|e| e.node == NodeId(1)));
        assert_eq!(sim.process(NodeId(1)).ticks, 0);
        sim.enact(FaultAction::on(FaultTag::ResumeNode, NodeId(1))).unwrap();
        sim.run_window(100_000_000).unwrap();
        assert!(sim.process(NodeId(1)).ticks > 0);
    }

    #[test]
    fn paused_node_gets_buffered_messages_on_resume() {
        let c = SimConfig { min_latency_ns: 2_000_000, max_latency_ns: 2_000_000, ..cfg(9) };
        let mut sim = scripted(vec![(NodeId(1), 5), (NodeId(1), 6)], c);
        // Boot already sent; pause before delivery.
        sim.enact(FaultAction::on(FaultTag::PauseNode, NodeId(1))).unwrap();
        sim.run_window(50_000_000).unwrap();
        assert!(sim.process(NodeId(1)).got.is_empty());
        sim.enact(FaultAction::on(FaultTag::ResumeNode, NodeId(1))).unwrap();
        assert_eq!(sim.process(NodeId(1)).got, vec![5, 6]);
    }

    #[test]
    fn replays_are_identical() {
        let run = |seed| {
            let mut sim = Simulator::new(cfg(seed), |_| Pinger::default()).unwrap();
            let mut all = sim.run_window(300_000_000).unwrap();
            sim.enact(FaultAction::on(FaultTag::CrashNode, NodeId(2))).unwrap();
            all.extend(sim.run_window(300_000_000).unwrap());
            sim.enact(FaultAction::on(FaultTag::RestartNode, NodeId(2))).unwrap();
            all.extend(sim.run_window(300_000_000).unwrap());
            (all, sim.take_reports())
        };
        assert_eq!(run(21), run(21));
    }

    #[test]
    fn clock_offsets_respect_skew_bound() {
        let sim = Simulator::new(cfg(10), |_| Pinger::default()).unwrap();
        let offs = sim.clock_offsets();
        let (lo, hi) = (offs.iter().min().unwrap(), offs.iter().max().unwrap());
        assert!(hi - lo <= sim.config().skew_bound_ns);
    }

    #[test]
    fn crash_flushes_and_reports_down() {
        let mut sim = Simulator::new(cfg(12), |_| Pinger::default()).unwrap();
        sim.run_window(55_000_000).unwrap();
        sim.take_reports();
        sim.enact(FaultAction::on(FaultTag::CrashNode, NodeId(1))).unwrap();
        let reports = sim.take_reports();
        assert!(matches!(reports.last(), Some(ObserverReport::Down { node: NodeId(1), epoch: 0, batches: 1 })));
        sim.enact(FaultAction::on(FaultTag::RestartNode, NodeId(1))).unwrap();
        let reports = sim.take_reports();
        assert!(matches!(reports[0], ObserverReport::Clock(ClockRef { epoch: 1, .. })));
    }

    #[test]
    fn client_requests_route_to_leaders_or_time_out() {
        let mut sim = Simulator::new(cfg(13), |n| Pinger { leader: n == NodeId(2), ..Default::default() }).unwrap();
        sim.submit_at(1_000, ClientOp::Read { key: 0 });
        sim.run_window(10_000_000).unwrap();
        let op = &sim.client_history()[0];
        assert_eq!(op.target, Some(NodeId(2)));
        assert_eq!(op.outcome, Some(ClientOutcome::Ok(None)));

        let mut sim = Simulator::new(cfg(13), |_| Pinger::default()).unwrap();
        sim.submit_at(1_000, ClientOp::Read { key: 0 });
        let evs = sim.run_window(2_000_000_000).unwrap();
        assert_eq!(sim.client_history()[0].outcome, Some(ClientOutcome::Timeout));
        assert!(evs.iter().any(|e| matches!(e.kind, EventKind::ClientResponse(l) if l.as_str() == "read:timeout")));
    }
}
