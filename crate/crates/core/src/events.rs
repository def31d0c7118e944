//! Observation vocabulary shared by every stage of the fuzzing loop.
//!
//! An [`Event`] is something that happened at one node at one instant of that
//! node's monotonic clock: a packet leaving or arriving, a client request or
//! response, or an instrumented code location being reached. Packets are
//! identified by a 64-bit [`PacketId`] that both endpoints agree on, which is
//! all the timeline builder needs to draw cross-node causal arrows.

use std::fmt;
use std::io::{BufRead, Write};

use arrayvec::ArrayString;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds on some clock. Both monotonic and real-time stamps use it.
pub type Nanos = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventsError {
    #[error("monotonic timestamp {mono_ts} precedes the clock anchor {anchor} of node {node}")]
    BeforeBoot { node: NodeId, mono_ts: Nanos, anchor: Nanos },
    #[error("clock reference belongs to node {clock} but event is from node {event}")]
    WrongNode { clock: NodeId, event: NodeId },
    #[error("operation label {0:?} is longer than {OP_LABEL_CAP} bytes")]
    LabelTooLong(String),
    #[error("malformed trace record: {0}")]
    Malformed(String),
    #[error("trace i/o: {0}")]
    Io(String),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Identifier of an instrumented function or block, drawn from the SUT's
/// instrumentation registry.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CodeId(pub u32);

pub const OP_LABEL_CAP: usize = 24;

/// Short inline label naming a client operation (`"write"`, `"read:ok"`, ...).
pub type OpLabel = ArrayString<OP_LABEL_CAP>;

pub fn op_label(s: &str) -> Result<OpLabel, EventsError> {
    OpLabel::from(s).map_err(|_| EventsError::LabelTooLong(s.to_owned()))
}

/// What kind of thing an event records. Timestamps and packet identities are
/// deliberately not part of the kind: abstractions reason over kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    PacketSend,
    PacketRecv,
    ClientRequest(OpLabel),
    ClientResponse(OpLabel),
    Code(CodeId),
}

impl EventKind {
    pub fn tag(&self) -> &'static str {
        match self {
            EventKind::PacketSend => "PacketSend",
            EventKind::PacketRecv => "PacketRecv",
            EventKind::ClientRequest(_) => "ClientRequest",
            EventKind::ClientResponse(_) => "ClientResponse",
            EventKind::Code(_) => "CodeEvent",
        }
    }

    pub fn is_packet(&self) -> bool {
        matches!(self, EventKind::PacketSend | EventKind::PacketRecv)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::PacketSend | EventKind::PacketRecv => f.write_str(self.tag()),
            EventKind::ClientRequest(l) | EventKind::ClientResponse(l) => {
                write!(f, "{}:{}", self.tag(), l)
            }
            EventKind::Code(c) => write!(f, "CodeEvent:{}", c.0),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PacketId(pub u64);

impl fmt::Display for PacketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// splitmix64 finaliser. A bijection on `u64`.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Packet identity synthesised from the sender, the receiver, and the
/// sender's per-destination sequence number.
///
/// The three fields are packed into one word (16 + 16 + 32 bits) and then
/// run through a bijective mixer, so the map is injective as long as
/// `send_seq < 2^32`.
pub fn make_packet_id(src: NodeId, dst: NodeId, send_seq: u64) -> PacketId {
    let packed = (u64::from(src.0) << 48) | (u64::from(dst.0) << 32) | (send_seq & 0xffff_ffff);
    // Sequence bits beyond 32 are folded in rather than dropped.
    PacketId(mix64(packed ^ mix64(send_seq >> 32).wrapping_mul(send_seq >> 32)))
}

/// Globally unique handle of an event inside one run: the node plus its
/// per-node sequence number.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct EventId {
    pub node: NodeId,
    pub seq: u64,
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.node, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub node: NodeId,
    /// Nanoseconds since the node's machine booted.
    pub mono_ts: Nanos,
    pub kind: EventKind,
    /// Present iff `kind` is a packet event.
    pub packet: Option<PacketId>,
    pub seq_in_node: u64,
}

impl Event {
    pub fn id(&self) -> EventId {
        EventId { node: self.node, seq: self.seq_in_node }
    }
}

/// Anchors announced by an observer when its node boots: a monotonic and a
/// real-time reading taken at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockRef {
    pub node: NodeId,
    /// Boot epoch of the node this reference was announced in.
    pub epoch: u32,
    pub mono_anchor: Nanos,
    pub real_anchor: Nanos,
    pub skew_bound_ns: Nanos,
}

impl ClockRef {
    pub fn mono_to_real(&self, mono_ts: Nanos) -> Result<Nanos, EventsError> {
        if mono_ts < self.mono_anchor {
            return Err(EventsError::BeforeBoot {
                node: self.node,
                mono_ts,
                anchor: self.mono_anchor,
            });
        }
        Ok(self.real_anchor + (mono_ts - self.mono_anchor))
    }

    /// Like [`ClockRef::mono_to_real`] but checks that `ev` was observed at
    /// this clock's node.
    pub fn event_real_time(&self, ev: &Event) -> Result<Nanos, EventsError> {
        if ev.node != self.node {
            return Err(EventsError::WrongNode { clock: self.node, event: ev.node });
        }
        self.mono_to_real(ev.mono_ts)
    }
}

pub fn mono_to_real(clock: &ClockRef, mono_ts: Nanos) -> Result<Nanos, EventsError> {
    clock.mono_to_real(mono_ts)
}

/// A group of events forwarded by one observer in a single flush.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub node: NodeId,
    pub epoch: u32,
    pub seq_no: u64,
    /// Monotonic time of the flush. Every event the node produced up to this
    /// instant is in this batch or an earlier one.
    pub flushed_at: Nanos,
    pub events: Vec<Event>,
}

/// Flat on-disk shape of an event. Field order is the interchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EventRecord {
    node: NodeId,
    mono_ts: Nanos,
    kind: String,
    code_id: Option<u32>,
    op_label: Option<String>,
    packet: Option<u64>,
    seq_in_node: u64,
}

impl From<&Event> for EventRecord {
    fn from(ev: &Event) -> Self {
        let (code_id, op_label) = match ev.kind {
            EventKind::Code(c) => (Some(c.0), None),
            EventKind::ClientRequest(l) | EventKind::ClientResponse(l) => {
                (None, Some(l.as_str().to_owned()))
            }
            _ => (None, None),
        };
        EventRecord {
            node: ev.node,
            mono_ts: ev.mono_ts,
            kind: ev.kind.tag().to_owned(),
            code_id,
            op_label,
            packet: ev.packet.map(|p| p.0),
            seq_in_node: ev.seq_in_node,
        }
    }
}

impl TryFrom<EventRecord> for Event {
    type Error = EventsError;

    fn try_from(r: EventRecord) -> Result<Self, Self::Error> {
        let label = |r: &EventRecord| -> Result<OpLabel, EventsError> {
            let l = r
                .op_label
                .as_deref()
                .ok_or_else(|| EventsError::Malformed(format!("{} without op_label", r.kind)))?;
            op_label(l)
        };
        let kind = match r.kind.as_str() {
            "PacketSend" => EventKind::PacketSend,
            "PacketRecv" => EventKind::PacketRecv,
            "ClientRequest" => EventKind::ClientRequest(label(&r)?),
            "ClientResponse" => EventKind::ClientResponse(label(&r)?),
            "CodeEvent" => EventKind::Code(CodeId(r.code_id.ok_or_else(|| {
                EventsError::Malformed("CodeEvent without code_id".into())
            })?)),
            other => return Err(EventsError::Malformed(format!("unknown kind {other:?}"))),
        };
        let packet = r.packet.map(PacketId);
        if kind.is_packet() != packet.is_some() {
            return Err(EventsError::Malformed(format!(
                "packet field must be present iff kind is a packet event (seq {})",
                r.seq_in_node
            )));
        }
        Ok(Event { node: r.node, mono_ts: r.mono_ts, kind, packet, seq_in_node: r.seq_in_node })
    }
}

impl Serialize for Event {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        EventRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Event {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = EventRecord::deserialize(d)?;
        Event::try_from(r).map_err(serde::de::Error::custom)
    }
}

/// Writes events as one JSON object per line.
pub fn write_jsonl<'a, W: Write>(
    mut w: W,
    events: impl IntoIterator<Item = &'a Event>,
) -> Result<(), EventsError> {
    for ev in events {
        let line = serde_json::to_string(ev).map_err(|e| EventsError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| EventsError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Event>, EventsError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| EventsError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EventsError::Malformed(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn packet_id_is_deterministic_and_role_sensitive() {
        let a = make_packet_id(NodeId(1), NodeId(2), 0);
        assert_eq!(a, make_packet_id(NodeId(1), NodeId(2), 0));
        assert_ne!(a, make_packet_id(NodeId(2), NodeId(1), 0));
    }

    #[test]
    fn packet_ids_do_not_collide_at_desk_scale() {
        let mut seen = HashSet::new();
        for src in 0..10u16 {
            for dst in 0..10u16 {
                for seq in 0..100u64 {
                    assert!(seen.insert(make_packet_id(NodeId(src), NodeId(dst), seq)));
                }
            }
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn mono_to_real_is_an_offset() {
        let clock = ClockRef {
            node: NodeId(0),
            epoch: 0,
            mono_anchor: 0,
            real_anchor: 1_000_000,
            skew_bound_ns: 100,
        };
        assert_eq!(clock.mono_to_real(0), Ok(1_000_000));
        assert_eq!(clock.mono_to_real(500), Ok(1_000_500));

        let late = ClockRef { mono_anchor: 10, ..clock };
        assert_eq!(late.mono_to_real(10), Ok(1_000_000));
        assert!(matches!(late.mono_to_real(9), Err(EventsError::BeforeBoot { .. })));
    }

    #[test]
    fn event_real_time_rejects_foreign_clock() {
        let clock = ClockRef {
            node: NodeId(0),
            epoch: 0,
            mono_anchor: 0,
            real_anchor: 0,
            skew_bound_ns: 1,
        };
        let ev = Event {
            node: NodeId(3),
            mono_ts: 5,
            kind: EventKind::Code(CodeId(1)),
            packet: None,
            seq_in_node: 0,
        };
        assert!(matches!(clock.event_real_time(&ev), Err(EventsError::WrongNode { .. })));
    }

    #[test]
    fn jsonl_field_order_is_fixed() {
        let ev = Event {
            node: NodeId(2),
            mono_ts: 77,
            kind: EventKind::ClientRequest(op_label("write").unwrap()),
            packet: None,
            seq_in_node: 4,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [&ev]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"node\":2,\"mono_ts\":77,\"kind\":\"ClientRequest\",\"code_id\":null,\
             \"op_label\":\"write\",\"packet\":null,\"seq_in_node\":4}\n"
        );
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![ev]);
    }

    #[test]
    fn malformed_records_are_rejected() {
        let bad = r#"{"node":0,"mono_ts":1,"kind":"PacketSend","code_id":null,"op_label":null,"packet":null,"seq_in_node":0}"#;
        assert!(read_jsonl(bad.as_bytes()).is_err());
        let bad = r#"{"node":0,"mono_ts":1,"kind":"Teleport","code_id":null,"op_label":null,"packet":null,"seq_in_node":0}"#;
        assert!(read_jsonl(bad.as_bytes()).is_err());
    }

    fn arb_kind() -> impl Strategy<Value = EventKind> {
        prop_oneof![
            Just(EventKind::PacketSend),
            Just(EventKind::PacketRecv),
            "[a-z:]{1,12}".prop_map(|s| EventKind::ClientRequest(op_label(&s).unwrap())),
            "[a-z:]{1,12}".prop_map(|s| EventKind::ClientResponse(op_label(&s).unwrap())),
            any::<u32>().prop_map(|c| EventKind::Code(CodeId(c))),
        ]
    }

    proptest! {
        #[test]
        fn jsonl_round_trips(kind in arb_kind(), node in any::<u16>(), ts in any::<u64>(),
                             seq in any::<u64>(), pkt in any::<u64>()) {
            let ev = Event {
                node: NodeId(node),
                mono_ts: ts,
                kind,
                packet: kind.is_packet().then_some(PacketId(pkt)),
                seq_in_node: seq,
            };
            let mut buf = Vec::new();
            write_jsonl(&mut buf, [&ev]).unwrap();
            prop_assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![ev]);
        }

        #[test]
        fn mono_to_real_is_monotone(anchor in 0u64..1 << 40, real in 0u64..1 << 40,
                                    a in 0u64..1 << 40, b in 0u64..1 << 40) {
            let clock = ClockRef { node: NodeId(0), epoch: 0, mono_anchor: anchor,
                                   real_anchor: real, skew_bound_ns: 1 };
            let (lo, hi) = (anchor + a.min(b), anchor + a.max(b));
            prop_assert!(clock.mono_to_real(lo).unwrap() <= clock.mono_to_real(hi).unwrap());
            if lo < hi {
                prop_assert!(clock.mono_to_real(lo).unwrap() < clock.mono_to_real(hi).unwrap());
            }
        }

        #[test]
        fn packet_ids_injective_on_random_pairs(s1 in 0u16..64, d1 in 0u16..64, q1 in 0u64..1 << 32,
                                                s2 in 0u16..64, d2 in 0u16..64, q2 in 0u64..1 << 32) {
            let same = (s1, d1, q1) == (s2, d2, q2);
            let eq = make_packet_id(NodeId(s1), NodeId(d1), q1) == make_packet_id(NodeId(s2), NodeId(d2), q2);
            prop_assert_eq!(same, eq);
        }
    }
}
