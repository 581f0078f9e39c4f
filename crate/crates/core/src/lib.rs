//! Dynamic resource management around process sets.
//!
//! The crate is organised bottom-up:
//!
//! * [`pset`]: process identities, named process sets and their algebra
//! * [`psetop`]: the set-operation lifecycle (specify, execute, query, complete, deny)
//! * [`datastore`]: per-PSet publish/lookup
//! * [`col`]: optimization payloads attached to operations
//! * [`cluster`]: simulated nodes, slots and process lifecycle
//! * [`scheduler`]: the decision engine and the control/resource trees
//! * [`harness`]: scenarios, the event loop, traces, replay and metrics

pub mod cluster;
pub mod col;
pub mod datastore;
pub mod harness;
pub mod pset;
pub mod psetop;
pub mod scheduler;

/// Simulation time in integer ticks.
pub type Tick = u64;

pub use cluster::{Cluster, Placement, ProcState, SlotRef};
pub use col::{col_speedup, ColAttributes, ColObject};
pub use datastore::DataStore;
pub use pset::{OpId, PSet, PSetName, PSetRegistry, ProcessId};
pub use psetop::{OpState, OpTable, PSetOpKind};
pub use scheduler::{Policy, PolicyName};
