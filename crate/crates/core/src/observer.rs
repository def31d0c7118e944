//! Per-node event tap.
//!
//! An observer buffers the events its node produces and hands them to the
//! mediator in numbered batches. Batch numbers restart at zero on every boot
//! and batches carry the boot epoch, so the mediator can put them back in
//! order no matter how they arrive. Empty batches are still numbered: they
//! tell the mediator that the node has nothing older left to report.

use thiserror::Error;

use crate::events::{Batch, ClockRef, Event, Nanos, NodeId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObserverError {
    #[error("clock for node {node} epoch {epoch} was already announced")]
    DuplicateAnnouncement { node: NodeId, epoch: u32 },
    #[error("observer for node {0} is down")]
    Down(NodeId),
}

#[derive(Debug, Clone)]
pub struct Observer {
    node: NodeId,
    epoch: u32,
    alive: bool,
    announced: bool,
    next_seq_no: u64,
    pending: Vec<Event>,
    boot_mono: Nanos,
    boot_real: Nanos,
    skew_bound_ns: Nanos,
}

impl Observer {
    /// An observer for a node that has not booted yet.
    pub fn new(node: NodeId, skew_bound_ns: Nanos) -> Self {
        Observer {
            node,
            epoch: 0,
            alive: false,
            announced: false,
            next_seq_no: 0,
            pending: Vec::new(),
            boot_mono: 0,
            boot_real: 0,
            skew_bound_ns,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Starts a new boot epoch at the given instant. The first boot is epoch 0.
    pub fn boot(&mut self, mono_now: Nanos, real_now: Nanos) {
        if self.alive || self.announced || self.next_seq_no > 0 {
            self.epoch += 1;
        }
        self.alive = true;
        self.announced = false;
        self.next_seq_no = 0;
        self.pending.clear();
        self.boot_mono = mono_now;
        self.boot_real = real_now;
    }

    /// Returns the clock anchors for the current boot. Only once per boot.
    pub fn announce_clock(&mut self) -> Result<ClockRef, ObserverError> {
        if !self.alive {
            return Err(ObserverError::Down(self.node));
        }
        if self.announced {
            return Err(ObserverError::DuplicateAnnouncement { node: self.node, epoch: self.epoch });
        }
        self.announced = true;
        Ok(ClockRef {
            node: self.node,
            epoch: self.epoch,
            mono_anchor: self.boot_mono,
            real_anchor: self.boot_real,
            skew_bound_ns: self.skew_bound_ns,
        })
    }

    /// Buffers an event. Returns `false` (and drops the event) while the
    /// node is down.
    pub fn record(&mut self, ev: Event) -> bool {
        if !self.alive {
            return false;
        }
        debug_assert_eq!(ev.node, self.node);
        debug_assert!(self.pending.last().is_none_or(|p| p.seq_in_node < ev.seq_in_node));
        self.pending.push(ev);
        true
    }

    /// Drains the buffer into the next batch of the current epoch.
    pub fn flush(&mut self, mono_now: Nanos) -> Result<Batch, ObserverError> {
        if !self.alive {
            return Err(ObserverError::Down(self.node));
        }
        let batch = Batch {
            node: self.node,
            epoch: self.epoch,
            seq_no: self.next_seq_no,
            flushed_at: mono_now,
            events: std::mem::take(&mut self.pending),
        };
        self.next_seq_no += 1;
        Ok(batch)
    }

    /// Final flush when the node goes down; afterwards the observer rejects
    /// events until the next boot. Returns the last batch and the number of
    /// batches the finished epoch produced.
    pub fn shutdown(&mut self, mono_now: Nanos) -> Result<(Batch, u64), ObserverError> {
        let last = self.flush(mono_now)?;
        self.alive = false;
        Ok((last, self.next_seq_no))
    }
}
