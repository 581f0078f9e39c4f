//! Run summary written next to the trace.

use serde::{Deserialize, Serialize};

use crate::pset::OpId;
use crate::psetop::{Initiator, OpState, PSetOpKind};
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub id: String,
    pub arrival_tick: Tick,
    pub start_tick: Option<Tick>,
    pub finish_tick: Option<Tick>,
    /// finish - arrival
    pub turnaround: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub op: OpId,
    pub kind: PSetOpKind,
    pub initiator: Initiator,
    pub job: String,
    pub state: OpState,
    pub submit_tick: Tick,
    pub decide_tick: Option<Tick>,
    pub complete_tick: Option<Tick>,
    /// decide - submit
    pub decision_latency: Option<Tick>,
    /// complete - decide
    pub pending_latency: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ticks: Tick,
    pub total_slots: u64,
    pub occupied_slot_ticks: u64,
    pub mean_utilization: f64,
    /// Occupied slots at the end of each tick.
    pub occupied: Vec<u64>,
    pub jobs: Vec<JobMetrics>,
    pub ops: Vec<OpMetrics>,
}

impl Metrics {
    pub fn mean_utilization_of(occupied_slot_ticks: u64, ticks: Tick, total_slots: u64) -> f64 {
        if ticks == 0 || total_slots == 0 {
            0.0
        } else {
            occupied_slot_ticks as f64 / (ticks as f64 * total_slots as f64)
        }
    }

    pub fn utilization(&self) -> Vec<f64> {
        self.occupied
            .iter()
            .map(|&o| Metrics::mean_utilization_of(o, 1, self.total_slots))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics always serialize");
        s.push('\n');
        s
    }
}
