//! Line-delimited trace records.
//!
//! Each line is `<tick:08> <seq:08> <CATEGORY> <json>`, so a plain lexical
//! sort orders records by (tick, seq). The JSON payload is an object tagged
//! by its `event` field.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{LookupId, Publisher};
use crate::pset::{OpId, PSetName, ProcessId};
use crate::psetop::{DenyReason, Initiator, OpState, PSetOpKind};
use crate::scheduler::PolicyName;
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSet {
    pub name: PSetName,
    pub members: Vec<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum PSetOpEvent {
    PsetCreated {
        name: PSetName,
        members: Vec<ProcessId>,
        job: String,
    },
    Specified {
        op: OpId,
        kind: PSetOpKind,
        inputs: Vec<PSetName>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        counts: Vec<usize>,
        initiator: Initiator,
        col: String,
        job: String,
    },
    Rejected {
        job: String,
        kind: PSetOpKind,
        error: String,
    },
    Transition {
        op: OpId,
        from: OpState,
        to: OpState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<DenyReason>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        outputs: Vec<OutputSet>,
    },
    Queried {
        job: String,
        pset: PSetName,
        kind: PSetOpKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        op: Option<OpId>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        outputs: Vec<PSetName>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessEvent {
    JobArrived {
        job: String,
    },
    JobStarted {
        job: String,
        pset: PSetName,
    },
    JobFinished {
        job: String,
    },
    Launching {
        pid: ProcessId,
        job: String,
        node: u32,
        slot: u32,
        mem: u64,
    },
    Running {
        pid: ProcessId,
    },
    Terminating {
        pid: ProcessId,
    },
    Terminated {
        pid: ProcessId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupOutcome {
    Found,
    NotFound,
    Parked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataEvent {
    Published {
        pset: PSetName,
        key: String,
        /// hex-encoded
        value: String,
        publisher: Publisher,
    },
    Lookup {
        pset: PSetName,
        key: String,
        wait: bool,
        requester: Publisher,
        outcome: LookupOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lookup: Option<LookupId>,
    },
    Resolved {
        lookup: LookupId,
        pset: PSetName,
        key: String,
        value: String,
        requester: Publisher,
    },
    Failed {
        pset: String,
        key: String,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecisionEvent {
    Grant {
        op: OpId,
        delta: u32,
    },
    Deny {
        op: OpId,
        reason: DenyReason,
    },
    Initiate {
        op: OpId,
        kind: PSetOpKind,
        target: PSetName,
        job: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricEvent {
    RunStart {
        seed: u64,
        horizon: Tick,
        nodes: u32,
        slots_per_node: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mem_per_node: Option<u64>,
        launch_latency: Tick,
        term_latency: Tick,
        policy: PolicyName,
    },
    Tick {
        occupied: u64,
        total: u64,
        live: u64,
    },
    RunEnd {
        ticks: Tick,
        occupied_slot_ticks: u64,
        total_slots: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceBody {
    PSetOp(PSetOpEvent),
    Process(ProcessEvent),
    Data(DataEvent),
    Decision(DecisionEvent),
    Metric(MetricEvent),
}

impl TraceBody {
    pub fn category(&self) -> &'static str {
        match self {
            TraceBody::PSetOp(_) => "PSETOP",
            TraceBody::Process(_) => "PROCESS",
            TraceBody::Data(_) => "DATA",
            TraceBody::Decision(_) => "DECISION",
            TraceBody::Metric(_) => "METRIC",
        }
    }

    fn payload(&self) -> String {
        let v = match self {
            TraceBody::PSetOp(e) => serde_json::to_string(e),
            TraceBody::Process(e) => serde_json::to_string(e),
            TraceBody::Data(e) => serde_json::to_string(e),
            TraceBody::Decision(e) => serde_json::to_string(e),
            TraceBody::Metric(e) => serde_json::to_string(e),
        };
        v.expect("trace events always serialize")
    }

    fn parse(category: &str, payload: &str) -> Result<Self, String> {
        let err = |e: serde_json::Error| e.to_string();
        Ok(match category {
            "PSETOP" => TraceBody::PSetOp(serde_json::from_str(payload).map_err(err)?),
            "PROCESS" => TraceBody::Process(serde_json::from_str(payload).map_err(err)?),
            "DATA" => TraceBody::Data(serde_json::from_str(payload).map_err(err)?),
            "DECISION" => TraceBody::Decision(serde_json::from_str(payload).map_err(err)?),
            "METRIC" => TraceBody::Metric(serde_json::from_str(payload).map_err(err)?),
            other => return Err(format!("unknown category `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub tick: Tick,
    pub seq: u64,
    pub body: TraceBody,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{:08} {:08} {} {}",
            self.tick,
            self.seq,
            self.body.category(),
            self.body.payload()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tick: Tick, body: TraceBody) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { tick, seq, body });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }

    /// Parse trace text. Ordering is not checked here; see replay.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| TraceError {
                line: line_no,
                message,
            };
            let mut parts = line.splitn(4, ' ');
            let (Some(tick), Some(seq), Some(cat), Some(payload)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected `<tick> <seq> <CATEGORY> <json>`".into()));
            };
            let tick = tick
                .parse()
                .map_err(|_| err(format!("bad tick `{tick}`")))?;
            let seq = seq.parse().map_err(|_| err(format!("bad seq `{seq}`")))?;
            let body = TraceBody::parse(cat, payload).map_err(err)?;
            records.push(TraceRecord { tick, seq, body });
        }
        Ok(Trace { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_round_trips() {
        let mut t = Trace::new();
        t.push(
            3,
            TraceBody::PSetOp(PSetOpEvent::Transition {
                op: OpId(1),
                from: OpState::Requested,
                to: OpState::ExecutedPending,
                reason: None,
                outputs: vec![OutputSet {
                    name: PSetName::new("rm/op1_out0").unwrap(),
                    members: vec![ProcessId(4)],
                }],
            }),
        );
        t.push(
            12,
            TraceBody::Data(DataEvent::Published {
                pset: PSetName::new("app/a").unwrap(),
                key: "k".into(),
                value: hex::encode(b"v"),
                publisher: Publisher::Process(ProcessId(2)),
            }),
        );
        let text = t.to_text();
        assert!(text.starts_with("00000003 00000000 PSETOP {\"event\":\"transition\""));
        assert_eq!(Trace::parse(&text).unwrap(), t);
        let mut sorted: Vec<&str> = text.lines().collect();
        sorted.sort();
        assert_eq!(sorted, text.lines().collect::<Vec<_>>());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert_eq!(Trace::parse("garbage").unwrap_err().line, 1);
        let bad = "00000000 00000000 NOPE {}\n";
        assert!(Trace::parse(bad).is_err());
        let bad = "00000000 00000000 PSETOP {\"event\":\"bogus\"}\n";
        assert!(Trace::parse(bad).is_err());
    }
}
