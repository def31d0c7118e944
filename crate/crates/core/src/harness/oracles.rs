use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::events::NodeId;
use crate::netsim::{AssertionReport, ClientOp, ClientOpRecord, ClientOutcome, LogLine, NetworkState, NodeStatus};

use super::config::OracleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FindingKind {
    LogKeyword,
    AssertionFired,
    ConsistencyViolation,
    NoLeaderTooLong,
}

/// A finding before it is tied to a step of a campaign.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Detection {
    pub kind: FindingKind,
    pub node: Option<NodeId>,
    pub detail: String,
}

/// Everything the oracles look at after one window.
pub struct WindowObservation<'a> {
    pub logs: &'a [LogLine],
    pub assertions: &'a [AssertionReport],
    pub history: &'a [ClientOpRecord],
    pub network: &'a NetworkState,
    pub leader_present: bool,
}

/// Oracle memory within one schedule.
#[derive(Debug, Clone, Default)]
pub struct OracleState {
    leaders: BTreeMap<u64, NodeId>,
    leaderless: u32,
    checked_reads: BTreeSet<u64>,
    reported: BTreeSet<Detection>,
}

const LEADER_LINE: &str = "became leader for term ";

impl OracleState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs every oracle over one window. A detection identical to one
    /// already reported in this schedule is not repeated.
    pub fn check(&mut self, cfg: &OracleConfig, obs: &WindowObservation<'_>) -> Vec<Detection> {
        let mut found = Vec::new();
        let keywords: Vec<String> = cfg.keywords.iter().map(|k| k.to_lowercase()).collect();
        for line in obs.logs {
            let lower = line.text.to_lowercase();
            if let Some(k) = keywords.iter().find(|k| lower.contains(k.as_str())) {
                found.push(Detection {
                    kind: FindingKind::LogKeyword,
                    node: Some(line.node),
                    detail: format!("{k:?} in log line: {}", line.text),
                });
            }
            if let Some(term) = line.text.strip_prefix(LEADER_LINE).and_then(|t| t.trim().parse::<u64>().ok()) {
                match self.leaders.get(&term) {
                    Some(&other) if other != line.node => found.push(Detection {
                        kind: FindingKind::ConsistencyViolation,
                        node: Some(line.node),
                        detail: format!("two leaders in term {term}: {other} and {}", line.node),
                    }),
                    Some(_) => {}
                    None => {
                        self.leaders.insert(term, line.node);
                    }
                }
            }
        }
        for a in obs.assertions {
            found.push(Detection {
                kind: FindingKind::AssertionFired,
                node: Some(a.node),
                detail: a.message.clone(),
            });
        }
        found.extend(self.check_reads(obs.history));

        let healthy = obs.network.fully_connected()
            && obs.network.statuses().iter().all(|s| *s == NodeStatus::Running);
        if healthy && !obs.leader_present {
            self.leaderless += 1;
            if self.leaderless == cfg.leaderless_windows + 1 {
                found.push(Detection {
                    kind: FindingKind::NoLeaderTooLong,
                    node: None,
                    detail: format!("no leader for {} windows with a healthy cluster", self.leaderless),
                });
            }
        } else {
            self.leaderless = 0;
        }

        found.retain(|d| self.reported.insert(d.clone()));
        found
    }

    /// Session check on reads: a successful read must not return a value
    /// that a completed write had already superseded when the read began.
    fn check_reads(&mut self, history: &[ClientOpRecord]) -> Vec<Detection> {
        let mut found = Vec::new();
        for read in history {
            let (ClientOp::Read { key }, Some(ClientOutcome::Ok(value))) = (read.op, read.outcome) else {
                continue;
            };
            if !self.checked_reads.insert(read.id) {
                continue;
            }
            let acked_before: Vec<&ClientOpRecord> = history
                .iter()
                .filter(|w| matches!(w.op, ClientOp::Write { key: k, .. } if k == key))
                .filter(|w| matches!(w.outcome, Some(ClientOutcome::Ok(_))))
                .filter(|w| w.completed_at.is_some_and(|c| c < read.invoked_at))
                .collect();
            if acked_before.is_empty() {
                continue;
            }
            let stale = match value {
                None => Some("read found no value".to_owned()),
                Some(v) => {
                    let source = history
                        .iter()
                        .find(|w| matches!(w.op, ClientOp::Write { key: k, value } if k == key && value == v));
                    match source {
                        None => Some(format!("read returned {v}, which was never written")),
                        Some(src) => {
                            let src_done = match src.outcome {
                                Some(ClientOutcome::Ok(_)) => src.completed_at,
                                _ => None,
                            };
                            acked_before
                                .iter()
                                .find(|w| src_done.is_some_and(|d| d < w.invoked_at))
                                .map(|w| match w.op {
                                    ClientOp::Write { value: newer, .. } => {
                                        format!("read returned {v} although write of {newer} completed first")
                                    }
                                    _ => unreachable!("filtered to writes"),
                                })
                        }
                    }
                }
            };
            if let Some(why) = stale {
                found.push(Detection {
                    kind: FindingKind::ConsistencyViolation,
                    node: read.target,
                    detail: format!("stale read of key {key} (op {}): {why}", read.id),
                });
            }
        }
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(node: u16, text: &str) -> LogLine {
        LogLine { node: NodeId(node), at: 0, text: text.into() }
    }

    fn op(id: u64, op: ClientOp, invoked: u64, done: u64, outcome: ClientOutcome) -> ClientOpRecord {
        ClientOpRecord {
            id,
            op,
            target: Some(NodeId(0)),
            invoked_at: invoked,
            completed_at: Some(done),
            outcome: Some(outcome),
        }
    }

    fn observe<'a>(logs: &'a [LogLine], history: &'a [ClientOpRecord], net: &'a NetworkState) -> WindowObservation<'a> {
        WindowObservation { logs, assertions: &[], history, network: net, leader_present: true }
    }

    #[test]
    fn keyword_hit_is_case_insensitive() {
        let net = NetworkState::healthy(3);
        let mut st = OracleState::new();
        let logs = [line(1, "panic: FATAL state"), line(2, "became leader for term 3")];
        let found = st.check(&OracleConfig::default(), &observe(&logs, &[], &net));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, FindingKind::LogKeyword);
        assert_eq!(found[0].node, Some(NodeId(1)));
        // Reported once per schedule.
        assert!(st.check(&OracleConfig::default(), &observe(&logs, &[], &net)).is_empty());
    }

    #[test]
    fn two_leaders_in_one_term() {
        let net = NetworkState::healthy(4);
        let mut st = OracleState::new();
        let cfg = OracleConfig::default();
        assert!(st.check(&cfg, &observe(&[line(0, "became leader for term 2")], &[], &net)).is_empty());
        assert!(st.check(&cfg, &observe(&[line(0, "became leader for term 2")], &[], &net)).is_empty());
        assert!(st.check(&cfg, &observe(&[line(1, "became leader for term 3")], &[], &net)).is_empty());
        let found = st.check(&cfg, &observe(&[line(3, "became leader for term 2")], &[], &net));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, FindingKind::ConsistencyViolation);
        assert!(found[0].detail.contains("term 2"));
    }

    #[test]
    fn leaderless_reported_after_threshold() {
        let net = NetworkState::healthy(3);
        let cfg = OracleConfig { leaderless_windows: 2, ..OracleConfig::default() };
        let mut st = OracleState::new();
        let obs = WindowObservation { logs: &[], assertions: &[], history: &[], network: &net, leader_present: false };
        assert!(st.check(&cfg, &obs).is_empty());
        assert!(st.check(&cfg, &obs).is_empty());
        let found = st.check(&cfg, &obs);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, FindingKind::NoLeaderTooLong);
        assert!(st.check(&cfg, &obs).is_empty());
    }

    #[test]
    fn stale_and_fresh_reads() {
        let net = NetworkState::healthy(3);
        let cfg = OracleConfig::default();
        let w = |id, v, a, b| op(id, ClientOp::Write { key: 1, value: v }, a, b, ClientOutcome::Ok(None));
        let r = |id, v, a, b| op(id, ClientOp::Read { key: 1 }, a, b, ClientOutcome::Ok(v));
        // Write 10 then write 20, both acknowledged before the reads start.
        let base = vec![w(1, 10, 0, 5), w(2, 20, 10, 15)];

        let mut fresh = base.clone();
        fresh.push(r(3, Some(20), 20, 25));
        assert!(OracleState::new().check(&cfg, &observe(&[], &fresh, &net)).is_empty());

        let mut stale = base.clone();
        stale.push(r(3, Some(10), 20, 25));
        let found = OracleState::new().check(&cfg, &observe(&[], &stale, &net));
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, FindingKind::ConsistencyViolation);

        let mut empty = base.clone();
        empty.push(r(3, None, 20, 25));
        assert_eq!(OracleState::new().check(&cfg, &observe(&[], &empty, &net)).len(), 1);

        // Concurrent writes may land in either order.
        let concurrent = vec![w(1, 10, 0, 12), w(2, 20, 10, 15), r(3, Some(10), 20, 25)];
        assert!(OracleState::new().check(&cfg, &observe(&[], &concurrent, &net)).is_empty());

        // A read that started before the newer write finished may see the old value.
        let overlapping = vec![w(1, 10, 0, 5), w(2, 20, 10, 30), r(3, Some(10), 20, 25)];
        assert!(OracleState::new().check(&cfg, &observe(&[], &overlapping, &net)).is_empty());
    }
}
