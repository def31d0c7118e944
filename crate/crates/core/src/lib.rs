//! Timeline-guided fault-injection fuzzing of a simulated replicated log.
//!
//! The pieces, in the order a campaign uses them: [`netsim`] runs the
//! cluster ([`raftlite`]) under faults, [`observer`] batches instrumented
//! events, [`timeline`] rebuilds causally closed slices from them,
//! [`abstraction`] folds slices into summaries, [`novelty`] maps summaries
//! to abstract states and [`policy`] learns which faults lead somewhere new.
//! [`harness`] ties the loop together.

pub mod abstraction;
pub mod events;
pub mod harness;
pub mod netsim;
pub mod novelty;
pub mod observer;
pub mod policy;
pub mod raftlite;
pub mod report;
pub mod stats;
pub mod timeline;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use abstraction::{EventHistory, IncrementalAbstraction, TimelineAbstraction, VectorClock};
pub use events::{Batch, ClockRef, Event, EventId, EventKind, Nanos, NodeId};
pub use harness::{
    run_baseline_random, run_campaign, CampaignConfig, CampaignResult, FindingKind, HarnessError, Mode, OracleFinding,
    StepRecord,
};
pub use netsim::{FaultAction, FaultTag, SimConfig, Simulator};
pub use novelty::{StateId, StateRegistry, StateSignature};
pub use policy::QTable;
pub use timeline::{Timeline, TimelineGraph};

/// Any error the library reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}
