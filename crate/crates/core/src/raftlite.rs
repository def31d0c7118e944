//! A compact Raft-like replicated key-value log used as the system under test.
//!
//! Leader election, log replication, commit, snapshotting and single-step
//! membership removal. Interesting code locations call [`Ctx::emit`] with an
//! id from [`REGISTRY`]. Three defects can be switched on through
//! [`BugFlags`]:
//!
//! * `membership_rollback`: snapshots compact up to the last appended entry
//!   and record the newest (possibly uncommitted) configuration. A later
//!   conflict that discards an uncommitted configuration change then cannot
//!   find the last committed configuration and the node aborts.
//! * `split_vote`: clusters with an even number of members count a quorum of
//!   `n/2` votes, so two candidates can win the same term.
//! * `stale_read`: leaders answer reads from local state without going
//!   through the log, so a deposed leader serves stale data.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::events::{CodeId, Event, EventKind, Nanos, NodeId};
use crate::netsim::{ClientOp, ClientOutcome, ClientRequest, Ctx, Process, TimerKey};

pub const START_ELECTION: CodeId = CodeId(0);
pub const GRANT_VOTE: CodeId = CodeId(1);
pub const BECOME_LEADER: CodeId = CodeId(2);
pub const STEP_DOWN: CodeId = CodeId(3);
pub const APPEND_ENTRIES: CodeId = CodeId(4);
pub const REJECT_APPEND: CodeId = CodeId(5);
pub const COMMIT_ENTRY: CodeId = CodeId(6);
pub const TAKE_SNAPSHOT: CodeId = CodeId(7);
pub const INSTALL_SNAPSHOT: CodeId = CodeId(8);
pub const DELETE_CONFLICTING_ENTRIES: CodeId = CodeId(9);
pub const MEMBERSHIP_ROLLBACK: CodeId = CodeId(10);
pub const CONFIG_CHANGE_APPENDED: CodeId = CodeId(11);
pub const APPLY_CONFIG: CodeId = CodeId(12);

/// Instrumented locations, fixed at build time.
pub const REGISTRY: [(CodeId, &str); 13] = [
    (START_ELECTION, "StartElection"),
    (GRANT_VOTE, "GrantVote"),
    (BECOME_LEADER, "BecomeLeader"),
    (STEP_DOWN, "StepDown"),
    (APPEND_ENTRIES, "AppendEntries"),
    (REJECT_APPEND, "RejectAppend"),
    (COMMIT_ENTRY, "CommitEntry"),
    (TAKE_SNAPSHOT, "TakeSnapshot"),
    (INSTALL_SNAPSHOT, "InstallSnapshot"),
    (DELETE_CONFLICTING_ENTRIES, "DeleteConflictingEntries"),
    (MEMBERSHIP_ROLLBACK, "MembershipRollback"),
    (CONFIG_CHANGE_APPENDED, "ConfigChangeAppended"),
    (APPLY_CONFIG, "ApplyConfig"),
];

pub fn code_label(code: CodeId) -> Option<&'static str> {
    REGISTRY.iter().find(|(c, _)| *c == code).map(|(_, l)| *l)
}

/// The registry as a JSON object mapping code id to label.
pub fn registry_json() -> String {
    let map: BTreeMap<String, &str> =
        REGISTRY.iter().map(|(c, l)| (c.0.to_string(), *l)).collect();
    serde_json::to_string_pretty(&map).expect("string map serializes")
}

/// Ground truth for the membership-rollback defect: the first node at which
/// a configuration change was appended, a snapshot absorbed it while it was
/// still uncommitted, and a conflicting suffix was deleted after that. An
/// installed snapshot carrying an uncommitted change is announced by a
/// `ConfigChangeAppended` right before the `InstallSnapshot`.
pub fn rollback_sequence(events: &[Event]) -> Option<NodeId> {
    let mut by_node: BTreeMap<NodeId, Vec<&Event>> = BTreeMap::new();
    for e in events {
        by_node.entry(e.node).or_default().push(e);
    }
    by_node.into_iter().find_map(|(node, mut evs)| {
        evs.sort_by_key(|e| e.seq_in_node);
        let mut stage = 0;
        let mut prev = None;
        for e in evs {
            let EventKind::Code(c) = e.kind else { continue };
            stage = match (stage, c) {
                (_, CONFIG_CHANGE_APPENDED) => stage.max(1),
                // Committed, or discarded before any snapshot absorbed it.
                (_, APPLY_CONFIG) | (1, DELETE_CONFLICTING_ENTRIES) => 0,
                (1, TAKE_SNAPSHOT) => 2,
                (_, INSTALL_SNAPSHOT) if prev == Some(CONFIG_CHANGE_APPENDED) => 2,
                // The leader's snapshot replaced ours.
                (2, INSTALL_SNAPSHOT) => 0,
                (2, DELETE_CONFLICTING_ENTRIES) => return Some(node),
                (s, _) => s,
            };
            prev = Some(c);
        }
        None
    })
}

const ELECTION_TIMER: TimerKey = 0;
const HEARTBEAT_TIMER: TimerKey = 1;

/// Smallest membership a removal may leave behind.
pub const MIN_CLUSTER: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BugFlags {
    pub membership_rollback: bool,
    pub split_vote: bool,
    pub stale_read: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaftParams {
    pub snapshot_threshold: u64,
    pub election_min_ns: Nanos,
    pub election_max_ns: Nanos,
    pub heartbeat_ns: Nanos,
    pub max_entries_per_append: usize,
}

impl Default for RaftParams {
    fn default() -> Self {
        RaftParams {
            snapshot_threshold: 4,
            election_min_ns: 150_000_000,
            election_max_ns: 300_000_000,
            heartbeat_ns: 50_000_000,
            max_entries_per_append: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Noop,
    Write { key: u32, value: u64 },
    Read { key: u32 },
    ConfigChange(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub term: u64,
    pub index: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_index: u64,
    pub last_term: u64,
    pub kv: BTreeMap<u32, u64>,
    pub config: Vec<NodeId>,
    pub config_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg {
    RequestVote { term: u64, last_index: u64, last_term: u64 },
    Vote { term: u64, granted: bool },
    Append { term: u64, prev_index: u64, prev_term: u64, entries: Vec<Entry>, leader_commit: u64 },
    AppendReply { term: u64, success: bool, match_index: u64 },
    InstallSnapshot { term: u64, snapshot: Snapshot, leader_commit: u64 },
}

#[derive(Debug, Clone)]
struct Pending {
    term: u64,
    request: u64,
    result: Option<ClientOutcome>,
}

#[derive(Debug, Clone)]
pub struct RaftLite {
    id: NodeId,
    params: RaftParams,
    bugs: BugFlags,
    // Survives crashes.
    term: u64,
    voted_for: Option<NodeId>,
    log: Vec<Entry>,
    snap: Snapshot,
    // Volatile.
    role: Role,
    leader: Option<NodeId>,
    commit_index: u64,
    last_applied: u64,
    config_index: u64,
    kv: BTreeMap<u32, u64>,
    votes: BTreeSet<NodeId>,
    next_index: BTreeMap<NodeId, u64>,
    match_index: BTreeMap<NodeId, u64>,
    pending: BTreeMap<u64, Pending>,
    leader_contact: Option<Nanos>,
    aborted: bool,
}

impl RaftLite {
    pub fn new(id: NodeId, members: Vec<NodeId>, params: RaftParams, bugs: BugFlags) -> Self {
        RaftLite {
            id,
            params,
            bugs,
            term: 0,
            voted_for: None,
            log: Vec::new(),
            snap: Snapshot {
                last_index: 0,
                last_term: 0,
                kv: BTreeMap::new(),
                config: members,
                config_index: 0,
            },
            role: Role::Follower,
            leader: None,
            commit_index: 0,
            last_applied: 0,
            config_index: 0,
            kv: BTreeMap::new(),
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            pending: BTreeMap::new(),
            leader_contact: None,
            aborted: false,
        }
    }

    /// Node `id` of an `n`-node cluster where everyone starts as a member.
    pub fn cluster_member(id: NodeId, n: usize, params: RaftParams, bugs: BugFlags) -> Self {
        RaftLite::new(id, (0..n as u16).map(NodeId).collect(), params, bugs)
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn snapshot_index(&self) -> u64 {
        self.snap.last_index
    }

    pub fn last_index(&self) -> u64 {
        self.snap.last_index + self.log.len() as u64
    }

    pub fn config_index(&self) -> u64 {
        self.config_index
    }

    /// Entries kept after the snapshot.
    pub fn log(&self) -> &[Entry] {
        &self.log
    }

    pub fn kv(&self) -> &BTreeMap<u32, u64> {
        &self.kv
    }

    /// Configuration in effect: the newest one appended, committed or not.
    pub fn config(&self) -> &[NodeId] {
        self.latest_config().1
    }

    /// Whether the last committed configuration can still be read back.
    pub fn committed_config_retrievable(&self) -> bool {
        self.fetch_config(self.config_index).is_some()
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(self.snap.last_term, |e| e.term)
    }

    fn term_at(&self, index: u64) -> Option<u64> {
        if index == self.snap.last_index {
            Some(self.snap.last_term)
        } else {
            self.entry(index).map(|e| e.term)
        }
    }

    fn entry(&self, index: u64) -> Option<&Entry> {
        if index <= self.snap.last_index {
            return None;
        }
        self.log.get((index - self.snap.last_index - 1) as usize)
    }

    fn latest_config(&self) -> (u64, &[NodeId]) {
        self.log
            .iter()
            .rev()
            .find_map(|e| match &e.payload {
                Payload::ConfigChange(m) => Some((e.index, m.as_slice())),
                _ => None,
            })
            .unwrap_or((self.snap.config_index, self.snap.config.as_slice()))
    }

    fn fetch_config(&self, index: u64) -> Option<&[NodeId]> {
        if index == self.snap.config_index {
            return Some(&self.snap.config);
        }
        match self.entry(index) {
            Some(Entry { payload: Payload::ConfigChange(m), .. }) => Some(m),
            _ => None,
        }
    }

    fn quorum(&self, members: usize) -> usize {
        if self.bugs.split_vote && members % 2 == 0 {
            members / 2
        } else {
            members / 2 + 1
        }
    }

    fn reset_election_timer(&mut self, ctx: &mut Ctx<'_, Msg>) {
        let delay = ctx.rng().gen_range(self.params.election_min_ns..=self.params.election_max_ns);
        ctx.set_timer(ELECTION_TIMER, delay);
    }

    fn step_down(&mut self, term: u64, ctx: &mut Ctx<'_, Msg>) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            ctx.emit(STEP_DOWN);
            self.role = Role::Follower;
            self.votes.clear();
            self.pending.clear();
            ctx.cancel_timer(HEARTBEAT_TIMER);
            self.reset_election_timer(ctx);
        }
    }

    fn observe_term(&mut self, term: u64, ctx: &mut Ctx<'_, Msg>) {
        if term > self.term {
            self.leader = None;
            self.step_down(term, ctx);
        }
    }

    fn start_election(&mut self, ctx: &mut Ctx<'_, Msg>) {
        self.term += 1;
        self.voted_for = Some(self.id);
        self.role = Role::Candidate;
        self.leader = None;
        self.votes = BTreeSet::from([self.id]);
        ctx.emit(START_ELECTION);
        self.reset_election_timer(ctx);
        let (last_index, last_term) = (self.last_index(), self.last_term());
        for peer in self.peers() {
            ctx.send(peer, Msg::RequestVote { term: self.term, last_index, last_term });
        }
    }

    fn peers(&self) -> Vec<NodeId> {
        self.config().iter().copied().filter(|n| *n != self.id).collect()
    }

    fn become_leader(&mut self, ctx: &mut Ctx<'_, Msg>) {
        self.role = Role::Leader;
        self.leader = Some(self.id);
        ctx.emit(BECOME_LEADER);
        ctx.log(format!("became leader for term {}", self.term));
        ctx.cancel_timer(ELECTION_TIMER);
        let next = self.last_index() + 1;
        self.next_index = self.peers().into_iter().map(|p| (p, next)).collect();
        self.match_index = self.peers().into_iter().map(|p| (p, 0)).collect();
        self.append_local(Payload::Noop, ctx);
        self.broadcast_append(ctx);
        self.maybe_snapshot(ctx);
        ctx.set_timer(HEARTBEAT_TIMER, self.params.heartbeat_ns);
    }

    fn append_local(&mut self, payload: Payload, ctx: &mut Ctx<'_, Msg>) -> u64 {
        let index = self.last_index() + 1;
        if matches!(payload, Payload::ConfigChange(_)) {
            ctx.emit(CONFIG_CHANGE_APPENDED);
        }
        self.log.push(Entry { term: self.term, index, payload });
        index
    }

    fn broadcast_append(&mut self, ctx: &mut Ctx<'_, Msg>) {
        for peer in self.peers() {
            self.send_append(peer, ctx);
        }
    }

    fn send_append(&mut self, peer: NodeId, ctx: &mut Ctx<'_, Msg>) {
        let last = self.last_index();
        let next = *self.next_index.entry(peer).or_insert(last + 1);
        if next <= self.snap.last_index {
            let msg = Msg::InstallSnapshot {
                term: self.term,
                snapshot: self.snap.clone(),
                leader_commit: self.commit_index,
            };
            ctx.send(peer, msg);
            return;
        }
        let prev_index = next - 1;
        let prev_term = self.term_at(prev_index).expect("prev at or after snapshot");
        let start = (next - self.snap.last_index - 1) as usize;
        let entries: Vec<Entry> =
            self.log[start..].iter().take(self.params.max_entries_per_append).cloned().collect();
        ctx.send(
            peer,
            Msg::Append {
                term: self.term,
                prev_index,
                prev_term,
                entries,
                leader_commit: self.commit_index,
            },
        );
    }

    fn advance_leader_commit(&mut self, ctx: &mut Ctx<'_, Msg>) {
        let members = self.config().to_vec();
        let majority = members.len() / 2 + 1;
        let last = self.last_index();
        for n in (self.commit_index + 1..=last).rev() {
            if self.term_at(n) != Some(self.term) {
                continue;
            }
            let acks = members
                .iter()
                .filter(|m| {
                    **m == self.id || self.match_index.get(m).is_some_and(|&mi| mi >= n)
                })
                .count();
            if acks >= majority {
                ctx.emit(COMMIT_ENTRY);
                self.commit_to(n, ctx);
                return;
            }
        }
    }

    fn commit_to(&mut self, index: u64, ctx: &mut Ctx<'_, Msg>) {
        if index <= self.commit_index {
            return;
        }
        self.commit_index = index;
        self.apply_through(index);
        let committed_config = self
            .log
            .iter()
            .rev()
            .filter(|e| e.index <= index)
            .find_map(|e| matches!(e.payload, Payload::ConfigChange(_)).then_some(e.index))
            .unwrap_or(self.snap.config_index.min(index));
        if committed_config > self.config_index {
            self.config_index = committed_config;
            ctx.emit(APPLY_CONFIG);
            if self.role == Role::Leader && !self.config().contains(&self.id) {
                self.respond_ready(ctx);
                self.step_down(self.term, ctx);
                return;
            }
        }
        self.respond_ready(ctx);
        self.maybe_snapshot(ctx);
    }

    fn apply_through(&mut self, index: u64) {
        while self.last_applied < index {
            self.last_applied += 1;
            let Some(e) = self.entry(self.last_applied).cloned() else { continue };
            let outcome = match e.payload {
                Payload::Write { key, value } => {
                    self.kv.insert(key, value);
                    ClientOutcome::Ok(None)
                }
                Payload::Read { key } => ClientOutcome::Ok(self.kv.get(&key).copied()),
                Payload::ConfigChange(_) | Payload::Noop => ClientOutcome::Ok(None),
            };
            if let Some(p) = self.pending.get_mut(&e.index) {
                p.result = Some(if p.term == e.term { outcome } else { ClientOutcome::Fail });
            }
        }
    }

    fn respond_ready(&mut self, ctx: &mut Ctx<'_, Msg>) {
        let ready: Vec<u64> = self
            .pending
            .range(..=self.commit_index)
            .filter(|(_, p)| p.result.is_some())
            .map(|(i, _)| *i)
            .collect();
        for i in ready {
            let p = self.pending.remove(&i).expect("listed");
            ctx.respond(p.request, p.result.expect("filtered"));
        }
    }

    fn maybe_snapshot(&mut self, ctx: &mut Ctx<'_, Msg>) {
        let base = self.snap.last_index;
        if self.bugs.membership_rollback {
            let last = self.last_index();
            if last >= base + self.params.snapshot_threshold {
                // Compacts everything appended, committed or not, and keeps
                // whichever configuration is newest.
                self.apply_through(last);
                let (ci, cfg) = self.latest_config();
                let (ci, cfg) = (ci, cfg.to_vec());
                self.compact_to(last, cfg, ci, ctx);
            }
        } else if self.commit_index >= base + self.params.snapshot_threshold {
            let cfg = self
                .fetch_config(self.config_index)
                .expect("committed config is retained")
                .to_vec();
            self.compact_to(self.commit_index, cfg, self.config_index, ctx);
        }
    }

    fn compact_to(
        &mut self,
        index: u64,
        config: Vec<NodeId>,
        config_index: u64,
        ctx: &mut Ctx<'_, Msg>,
    ) {
        let last_term = self.term_at(index).expect("compaction point is in the log");
        let drop = (index - self.snap.last_index) as usize;
        self.log.drain(..drop);
        self.snap = Snapshot { last_index: index, last_term, kv: self.kv.clone(), config, config_index };
        ctx.emit(TAKE_SNAPSHOT);
    }

    fn membership_rollback(&mut self, ctx: &mut Ctx<'_, Msg>) {
        ctx.emit(MEMBERSHIP_ROLLBACK);
        if self.fetch_config(self.config_index).is_none() {
            let msg = format!(
                "fatal: membership rollback found no configuration entry at index {}",
                self.config_index
            );
            ctx.log(msg.clone());
            ctx.abort(msg);
            self.aborted = true;
        }
    }

    /// Drops the suffix starting at `index` after a term conflict.
    fn delete_from(&mut self, index: u64, ctx: &mut Ctx<'_, Msg>) {
        ctx.emit(DELETE_CONFLICTING_ENTRIES);
        let (latest, _) = self.latest_config();
        let uncommitted_config = latest >= index && latest > self.config_index;
        self.log.truncate((index - self.snap.last_index - 1) as usize);
        if uncommitted_config {
            self.membership_rollback(ctx);
        }
    }

    /// True when the leader's view contradicts an uncommitted part of our
    /// snapshot. Terms inside a log never decrease, so a leader entry in the
    /// compacted range with a newer term than our snapshot boundary cannot be
    /// the entry we compacted.
    fn snapshot_conflict(&self, prev_index: u64, prev_term: u64, entries: &[Entry]) -> bool {
        let (lo, hi, hi_term) = (self.commit_index, self.snap.last_index, self.snap.last_term);
        std::iter::once((prev_index, prev_term))
            .chain(entries.iter().map(|e| (e.index, e.term)))
            .filter(|&(i, _)| i > lo && i <= hi)
            .any(|(i, t)| t > hi_term || (i == hi && t != hi_term))
    }

    /// Conflict reaching into the snapshot: everything past the commit point
    /// has to go, including what the snapshot already absorbed.
    fn discard_uncommitted_snapshot(&mut self, ctx: &mut Ctx<'_, Msg>) {
        ctx.emit(DELETE_CONFLICTING_ENTRIES);
        let (latest, _) = self.latest_config();
        if latest > self.commit_index && latest > self.config_index {
            self.membership_rollback(ctx);
            if self.aborted {
                return;
            }
        }
        let config = self.fetch_config(self.config_index).unwrap_or(&self.snap.config).to_vec();
        self.log.clear();
        self.snap = Snapshot { last_index: 0, last_term: 0, kv: BTreeMap::new(), config, config_index: 0 };
        self.kv.clear();
        self.commit_index = 0;
        self.last_applied = 0;
        self.config_index = 0;
    }

    fn on_append(
        &mut self,
        from: NodeId,
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<Entry>,
        leader_commit: u64,
        ctx: &mut Ctx<'_, Msg>,
    ) {
        let reply = |ctx: &mut Ctx<'_, Msg>, term, success, match_index| {
            ctx.send(from, Msg::AppendReply { term, success, match_index });
        };
        if term == self.term && self.role == Role::Leader {
            // Another leader for our own term; only the split-vote defect
            // gets here. Staying silent avoids a reply storm.
            return;
        }
        if term < self.term {
            ctx.emit(REJECT_APPEND);
            reply(ctx, self.term, false, 0);
            return;
        }
        self.observe_term(term, ctx);
        if self.role == Role::Candidate {
            self.step_down(term, ctx);
        }
        self.leader = Some(from);
        self.leader_contact = Some(ctx.now());
        self.reset_election_timer(ctx);

        if self.commit_index < self.snap.last_index
            && self.snapshot_conflict(prev_index, prev_term, &entries)
        {
            self.discard_uncommitted_snapshot(ctx);
            if !self.aborted {
                reply(ctx, self.term, false, self.last_index());
            }
            return;
        }
        let base = self.snap.last_index;
        if prev_index > self.last_index() {
            ctx.emit(REJECT_APPEND);
            reply(ctx, self.term, false, self.last_index());
            return;
        }
        if prev_index >= base && self.term_at(prev_index) != Some(prev_term) {
            ctx.emit(REJECT_APPEND);
            let hint = self.commit_index.max(base).min(prev_index - 1);
            reply(ctx, self.term, false, hint);
            return;
        }
        let match_index = prev_index + entries.len() as u64;
        let mut appended = false;
        for e in entries {
            if e.index <= self.snap.last_index {
                continue;
            }
            if e.index <= self.last_index() {
                if self.term_at(e.index) == Some(e.term) {
                    continue;
                }
                self.delete_from(e.index, ctx);
                if self.aborted {
                    return;
                }
            }
            if matches!(e.payload, Payload::ConfigChange(_)) {
                ctx.emit(CONFIG_CHANGE_APPENDED);
            }
            self.log.push(e);
            appended = true;
        }
        if appended {
            ctx.emit(APPEND_ENTRIES);
        }
        if leader_commit > self.commit_index {
            self.commit_to(leader_commit.min(match_index), ctx);
        }
        self.maybe_snapshot(ctx);
        reply(ctx, self.term, true, match_index);
    }

    fn on_install_snapshot(
        &mut self,
        from: NodeId,
        term: u64,
        snapshot: Snapshot,
        leader_commit: u64,
        ctx: &mut Ctx<'_, Msg>,
    ) {
        if term == self.term && self.role == Role::Leader {
            return;
        }
        if term < self.term {
            ctx.send(from, Msg::AppendReply { term: self.term, success: false, match_index: 0 });
            return;
        }
        self.observe_term(term, ctx);
        if self.role == Role::Candidate {
            self.step_down(term, ctx);
        }
        self.leader = Some(from);
        self.leader_contact = Some(ctx.now());
        self.reset_election_timer(ctx);
        let upto = snapshot.last_index;
        if upto > self.commit_index {
            if snapshot.config_index > leader_commit.min(upto).max(self.commit_index) {
                ctx.emit(CONFIG_CHANGE_APPENDED);
            }
            ctx.emit(INSTALL_SNAPSHOT);
            if upto < self.last_index() && self.term_at(upto) == Some(snapshot.last_term) {
                let drop = (upto - self.snap.last_index) as usize;
                self.log.drain(..drop);
            } else {
                self.log.clear();
            }
            self.kv = snapshot.kv.clone();
            // Only a defective leader ships a snapshot reaching past its
            // commit point; what lies beyond it stays uncommitted here too.
            self.commit_index = self.commit_index.max(leader_commit.min(upto));
            self.last_applied = upto;
            if snapshot.config_index <= self.commit_index {
                if snapshot.config_index > self.config_index {
                    ctx.emit(APPLY_CONFIG);
                }
                self.config_index = snapshot.config_index;
            }
            self.snap = snapshot;
        }
        ctx.send(from, Msg::AppendReply { term: self.term, success: true, match_index: upto });
    }

    fn on_append_reply(
        &mut self,
        from: NodeId,
        term: u64,
        success: bool,
        match_index: u64,
        ctx: &mut Ctx<'_, Msg>,
    ) {
        self.observe_term(term, ctx);
        if self.role != Role::Leader || term != self.term {
            return;
        }
        let last = self.last_index();
        if success {
            let m = self.match_index.entry(from).or_insert(0);
            *m = (*m).max(match_index.min(last));
            let m = *m;
            self.next_index.insert(from, m + 1);
            self.advance_leader_commit(ctx);
            if self.role == Role::Leader && m < self.last_index() {
                self.send_append(from, ctx);
            }
        } else {
            let next = self.next_index.get(&from).copied().unwrap_or(last + 1);
            let backed = next.saturating_sub(1).min(match_index + 1).max(1);
            self.next_index.insert(from, backed);
            self.send_append(from, ctx);
        }
    }

    fn on_client_request(&mut self, req: ClientRequest, ctx: &mut Ctx<'_, Msg>) {
        if self.role != Role::Leader {
            return;
        }
        let payload = match req.op {
            ClientOp::Write { key, value } => Payload::Write { key, value },
            ClientOp::Read { key } if self.bugs.stale_read => {
                ctx.respond(req.id, ClientOutcome::Ok(self.kv.get(&key).copied()));
                return;
            }
            ClientOp::Read { key } => Payload::Read { key },
            ClientOp::RemoveNode(n) => {
                let (ci, members) = self.latest_config();
                if ci > self.config_index || !members.contains(&n) || members.len() <= MIN_CLUSTER {
                    ctx.respond(req.id, ClientOutcome::Fail);
                    return;
                }
                Payload::ConfigChange(members.iter().copied().filter(|m| *m != n).collect())
            }
        };
        let term = self.term;
        let index = self.append_local(payload, ctx);
        self.pending.insert(index, Pending { term, request: req.id, result: None });
        self.broadcast_append(ctx);
        self.maybe_snapshot(ctx);
    }
}

impl Process for RaftLite {
    type Msg = Msg;

    fn on_boot(&mut self, ctx: &mut Ctx<'_, Msg>) {
        self.role = Role::Follower;
        self.leader = None;
        self.votes.clear();
        self.pending.clear();
        self.next_index.clear();
        self.match_index.clear();
        self.kv = self.snap.kv.clone();
        self.commit_index = self.snap.last_index;
        self.last_applied = self.snap.last_index;
        self.config_index = self.snap.config_index;
        self.aborted = false;
        self.reset_election_timer(ctx);
    }

    fn on_timer(&mut self, key: TimerKey, ctx: &mut Ctx<'_, Msg>) {
        match key {
            ELECTION_TIMER if self.role != Role::Leader => {
                if self.config().contains(&self.id) {
                    self.start_election(ctx);
                } else {
                    self.reset_election_timer(ctx);
                }
            }
            HEARTBEAT_TIMER if self.role == Role::Leader => {
                self.broadcast_append(ctx);
                ctx.set_timer(HEARTBEAT_TIMER, self.params.heartbeat_ns);
            }
            _ => {}
        }
    }

    fn on_message(&mut self, from: NodeId, msg: Msg, ctx: &mut Ctx<'_, Msg>) {
        match msg {
            Msg::RequestVote { term, last_index, last_term } => {
                // A node that hears from a live leader ignores candidates, so
                // a removed member that never learnt of its removal cannot
                // keep deposing leaders with ever higher terms.
                let recent = self
                    .leader_contact
                    .is_some_and(|t| ctx.now() < t.saturating_add(self.params.election_min_ns));
                if self.role == Role::Leader || (recent && self.leader != Some(from)) {
                    ctx.send(from, Msg::Vote { term: self.term, granted: false });
                    return;
                }
                self.observe_term(term, ctx);
                let up_to_date = (last_term, last_index) >= (self.last_term(), self.last_index());
                let granted = term == self.term
                    && self.role == Role::Follower
                    && self.voted_for.is_none_or(|v| v == from)
                    && up_to_date;
                if granted {
                    self.voted_for = Some(from);
                    ctx.emit(GRANT_VOTE);
                    self.reset_election_timer(ctx);
                }
                ctx.send(from, Msg::Vote { term: self.term, granted });
            }
            Msg::Vote { term, granted } => {
                self.observe_term(term, ctx);
                if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    let members = self.config();
                    let count = self.votes.iter().filter(|v| members.contains(v)).count();
                    if count >= self.quorum(members.len()) {
                        self.become_leader(ctx);
                    }
                }
            }
            Msg::Append { term, prev_index, prev_term, entries, leader_commit } => {
                self.on_append(from, term, prev_index, prev_term, entries, leader_commit, ctx)
            }
            Msg::AppendReply { term, success, match_index } => {
                self.on_append_reply(from, term, success, match_index, ctx)
            }
            Msg::InstallSnapshot { term, snapshot, leader_commit } => {
                self.on_install_snapshot(from, term, snapshot, leader_commit, ctx)
            }
        }
    }

    fn on_client(&mut self, req: ClientRequest, ctx: &mut Ctx<'_, Msg>) {
        self.on_client_request(req, ctx);
    }

    fn on_crash(&mut self) {
        self.role = Role::Follower;
        self.leader = None;
        self.leader_contact = None;
        self.votes.clear();
        self.pending.clear();
        self.next_index.clear();
        self.match_index.clear();
        self.kv.clear();
    }

    fn is_leader(&self) -> bool {
        self.role == Role::Leader && !self.aborted
    }
}
