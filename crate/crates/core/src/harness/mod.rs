//! Scenario-driven simulation, trace emission and replay.

pub mod generator;
pub mod metrics;
pub mod replay;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use metrics::Metrics;
pub use replay::{replay_text, replay_trace, ReplayReport};
pub use scenario::{Action, ClusterSpec, JobSpec, Phase, Scenario, ScenarioError};
pub use sim::{run_scenario, RunOutput, SimError};
pub use trace::{Trace, TraceError, TraceRecord};

/// Scenarios shipped with the crate, as `(name, toml)`.
pub const SHIPPED: &[(&str, &str)] = &[
    ("grow_add", include_str!("../../scenarios/grow_add.toml")),
    ("urgent", include_str!("../../scenarios/urgent.toml")),
    (
        "idle_backfill",
        include_str!("../../scenarios/idle_backfill.toml"),
    ),
    (
        "idle_backfill_fifo",
        include_str!("../../scenarios/idle_backfill_fifo.toml"),
    ),
    ("datastore", include_str!("../../scenarios/datastore.toml")),
];

/// Look up a shipped scenario by name.
pub fn shipped(name: &str) -> Option<Scenario> {
    SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_toml(text).expect("shipped scenarios are valid"))
}
