//! The PSet-operation protocol.
//!
//! Every operation goes through `REQUESTED → EXECUTED_PENDING → COMPLETED`
//! or `REQUESTED → DENIED`. Applications (or the system) specify an
//! operation, the scheduler executes or denies it, and the application
//! observes pending operations through [`OpTable::query`] and acknowledges
//! them with [`OpTable::complete`]. Processes leaving through a SHRINK,
//! REPLACE or SUB are only handed back for termination on completion.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::col::ColObject;
use crate::pset::{self, AlgebraError, OpId, PSetError, PSetName, PSetRegistry, ProcessId};
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PSetOpKind {
    Null,
    Add,
    Sub,
    Grow,
    Shrink,
    Replace,
    Split,
    Union,
    Difference,
    Intersection,
}

impl PSetOpKind {
    pub const SUBMITTABLE: [PSetOpKind; 9] = [
        PSetOpKind::Add,
        PSetOpKind::Sub,
        PSetOpKind::Grow,
        PSetOpKind::Shrink,
        PSetOpKind::Replace,
        PSetOpKind::Split,
        PSetOpKind::Union,
        PSetOpKind::Difference,
        PSetOpKind::Intersection,
    ];

    /// Kinds that start new processes.
    pub fn adds_processes(self) -> bool {
        matches!(
            self,
            PSetOpKind::Add | PSetOpKind::Grow | PSetOpKind::Replace
        )
    }

    /// Kinds that hand processes back for termination.
    pub fn removes_processes(self) -> bool {
        matches!(
            self,
            PSetOpKind::Sub | PSetOpKind::Shrink | PSetOpKind::Replace
        )
    }

    pub fn is_resource_op(self) -> bool {
        self.adds_processes() || self.removes_processes()
    }

    fn single_input(self) -> bool {
        matches!(
            self,
            PSetOpKind::Grow | PSetOpKind::Shrink | PSetOpKind::Replace | PSetOpKind::Split
        )
    }
}

impl fmt::Display for PSetOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Initiator {
    Application,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpState {
    Requested,
    Denied,
    ExecutedPending,
    Completed,
}

impl OpState {
    pub fn is_terminal(self) -> bool {
        matches!(self, OpState::Denied | OpState::Completed)
    }

    pub fn can_transition_to(self, next: OpState) -> bool {
        matches!(
            (self, next),
            (OpState::Requested, OpState::Denied)
                | (OpState::Requested, OpState::ExecutedPending)
                | (OpState::ExecutedPending, OpState::Completed)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DenyReason {
    InsufficientResources,
    PolicyForbidden,
    InfeasibleRequest,
}

/// Kind-specific parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpParams {
    /// SPLIT output sizes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counts: Vec<usize>,
}

/// What a caller submits; the table assigns id and submit tick.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSpec {
    pub kind: PSetOpKind,
    pub inputs: Vec<PSetName>,
    pub params: OpParams,
    pub col: ColObject,
    pub initiator: Initiator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PSetOpRequest {
    pub op_id: OpId,
    pub kind: PSetOpKind,
    pub inputs: Vec<PSetName>,
    pub params: OpParams,
    pub col: ColObject,
    pub initiator: Initiator,
    pub submit_tick: Tick,
}

impl PSetOpRequest {
    /// Output sizes for ADD and SUB: the COL's `output_sizes`, or one output of `num_delta`.
    pub fn output_sizes(&self) -> Vec<usize> {
        let attrs = self.col.attrs();
        match &attrs.output_sizes {
            Some(sizes) => sizes.iter().map(|&s| s as usize).collect(),
            None => vec![attrs.num_delta as usize],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PSetOpRecord {
    pub request: PSetOpRequest,
    pub state: OpState,
    pub outputs: Vec<PSetName>,
    pub granted_delta: Option<u32>,
    pub deny_reason: Option<DenyReason>,
    pub decide_tick: Option<Tick>,
    pub complete_tick: Option<Tick>,
}

impl PSetOpRecord {
    pub fn op_id(&self) -> OpId {
        self.request.op_id
    }

    pub fn kind(&self) -> PSetOpKind {
        self.request.kind
    }

    pub fn touches(&self, pset: &PSetName) -> bool {
        self.request.inputs.contains(pset) || self.outputs.contains(pset)
    }

    /// Expected number of outputs once executed.
    pub fn expected_outputs(&self) -> usize {
        match self.kind() {
            PSetOpKind::Grow | PSetOpKind::Shrink => 2,
            PSetOpKind::Replace => 3,
            PSetOpKind::Union | PSetOpKind::Difference | PSetOpKind::Intersection => 1,
            PSetOpKind::Split => self.request.params.counts.len(),
            PSetOpKind::Add | PSetOpKind::Sub => self.request.output_sizes().len(),
            PSetOpKind::Null => 0,
        }
    }

    /// Output PSets whose members terminate on completion.
    pub fn removal_outputs(&self) -> &[PSetName] {
        match (self.kind(), self.outputs.as_slice()) {
            (PSetOpKind::Shrink, [del, _]) => std::slice::from_ref(del),
            (PSetOpKind::Replace, [_, del, _]) => std::slice::from_ref(del),
            (PSetOpKind::Sub, outs) => outs,
            _ => &[],
        }
    }
}

/// Answer to a query: the oldest pending operation touching a PSet, or NULL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub kind: PSetOpKind,
    pub op: Option<OpId>,
    pub outputs: Vec<PSetName>,
}

impl QueryResult {
    pub fn null() -> Self {
        QueryResult {
            kind: PSetOpKind::Null,
            op: None,
            outputs: Vec::new(),
        }
    }

    pub fn is_null(&self) -> bool {
        self.kind == PSetOpKind::Null
    }
}

/// Processes released to the process manager by a completion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompletionEffect {
    pub terminate: Vec<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PSetOpError {
    #[error("unknown pset `{0}`")]
    UnknownPSet(PSetName),
    #[error("unknown operation {0}")]
    UnknownOp(OpId),
    #[error("{kind} does not accept {got} input(s)")]
    ArityViolation { kind: PSetOpKind, got: usize },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("operation {op} is {state:?}")]
    IllegalState { op: OpId, state: OpState },
    #[error("process {0} is not a member of the inputs")]
    RemovalNotSubset(ProcessId),
    #[error("expected {expected} processes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("delta {delta} outside the COL bounds of operation {op}")]
    GrantOutOfBounds { op: OpId, delta: u32 },
    #[error("operation {op} must wait for older request {older} on a shared input")]
    BlockedByOlder { op: OpId, older: OpId },
    #[error(transparent)]
    Registry(#[from] PSetError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// The operation table: a single serialized state machine over all records.
#[derive(Debug, Clone, Default)]
pub struct OpTable {
    records: BTreeMap<OpId, PSetOpRecord>,
    next_id: u64,
}

fn check_unique(pids: &[ProcessId]) -> Result<(), PSetOpError> {
    let mut seen = HashSet::new();
    for &p in pids {
        if !seen.insert(p) {
            return Err(PSetError::DuplicateMember(p).into());
        }
    }
    Ok(())
}

impl OpTable {
    pub fn new() -> Self {
        OpTable {
            records: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn get(&self, op: OpId) -> Result<&PSetOpRecord, PSetOpError> {
        self.records.get(&op).ok_or(PSetOpError::UnknownOp(op))
    }

    pub fn records(&self) -> impl Iterator<Item = &PSetOpRecord> {
        self.records.values()
    }

    /// REQUESTED records in op-id order.
    pub fn requested(&self) -> impl Iterator<Item = &PSetOpRecord> {
        self.records
            .values()
            .filter(|r| r.state == OpState::Requested)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Validate and enqueue a request; returns immediately with its id.
    pub fn specify(
        &mut self,
        spec: OpSpec,
        registry: &PSetRegistry,
        tick: Tick,
    ) -> Result<OpId, PSetOpError> {
        let kind = spec.kind;
        if kind == PSetOpKind::Null {
            return Err(PSetOpError::BadParams("NULL is not submittable".into()));
        }
        let n = spec.inputs.len();
        let arity_ok = if kind.single_input() { n == 1 } else { n >= 1 };
        if !arity_ok {
            return Err(PSetOpError::ArityViolation { kind, got: n });
        }
        for name in &spec.inputs {
            if !registry.contains(name) {
                return Err(PSetOpError::UnknownPSet(name.clone()));
            }
        }
        let attrs = spec.col.attrs();
        if kind.is_resource_op() && attrs.num_delta == 0 {
            return Err(PSetOpError::BadParams(format!(
                "{kind} needs num_delta >= 1"
            )));
        }
        let first_len = registry.get(&spec.inputs[0])?.len();
        match kind {
            PSetOpKind::Split => {
                let counts = &spec.params.counts;
                if counts.is_empty() || counts.contains(&0) {
                    return Err(PSetOpError::BadParams(
                        "split counts must be non-empty and positive".into(),
                    ));
                }
                let sum: usize = counts.iter().sum();
                if sum != first_len {
                    return Err(PSetOpError::BadParams(format!(
                        "split counts sum to {sum}, input has {first_len} members"
                    )));
                }
            }
            PSetOpKind::Add | PSetOpKind::Sub => {
                if let Some(sizes) = &attrs.output_sizes {
                    let sum: u32 = sizes.iter().sum();
                    if sum != attrs.num_delta {
                        return Err(PSetOpError::BadParams(format!(
                            "output_sizes sum to {sum}, num_delta is {}",
                            attrs.num_delta
                        )));
                    }
                }
            }
            PSetOpKind::Shrink | PSetOpKind::Replace if attrs.num_delta as usize > first_len => {
                return Err(PSetOpError::BadParams(format!(
                    "cannot remove {} of {first_len} processes",
                    attrs.num_delta
                )));
            }
            _ => {}
        }
        if kind != PSetOpKind::Split && !spec.params.counts.is_empty() {
            return Err(PSetOpError::BadParams(format!("{kind} takes no counts")));
        }

        let op_id = OpId(self.next_id);
        self.next_id += 1;
        let request = PSetOpRequest {
            op_id,
            kind,
            inputs: spec.inputs,
            params: spec.params,
            col: spec.col,
            initiator: spec.initiator,
            submit_tick: tick,
        };
        self.records.insert(
            op_id,
            PSetOpRecord {
                request,
                state: OpState::Requested,
                outputs: Vec::new(),
                granted_delta: None,
                deny_reason: None,
                decide_tick: None,
                complete_tick: None,
            },
        );
        Ok(op_id)
    }

    fn record_in(&self, op: OpId, state: OpState) -> Result<&PSetOpRecord, PSetOpError> {
        let rec = self.get(op)?;
        if rec.state != state {
            return Err(PSetOpError::IllegalState {
                op,
                state: rec.state,
            });
        }
        Ok(rec)
    }

    /// Oldest REQUESTED record sharing a non-empty input with `op`, if older than it.
    pub fn blocking_request(&self, op: OpId) -> Option<OpId> {
        let rec = self.records.get(&op)?;
        self.records
            .range(..op)
            .filter(|(_, r)| r.state == OpState::Requested)
            .find(|(_, r)| {
                r.request
                    .inputs
                    .iter()
                    .any(|i| !i.is_zero() && rec.request.inputs.contains(i))
            })
            .map(|(&id, _)| id)
    }

    /// Carry out a granted operation: create its outputs and mark it pending.
    ///
    /// `new_processes` feeds ADD/GROW/REPLACE, `removal` selects the leaving
    /// processes of SUB/SHRINK/REPLACE.
    pub fn execute(
        &mut self,
        op: OpId,
        new_processes: &[ProcessId],
        removal: &[ProcessId],
        registry: &mut PSetRegistry,
        tick: Tick,
    ) -> Result<Vec<PSetName>, PSetOpError> {
        let rec = self.record_in(op, OpState::Requested)?;
        if let Some(older) = self.blocking_request(op) {
            return Err(PSetOpError::BlockedByOlder { op, older });
        }
        let req = &rec.request;
        let kind = req.kind;
        let inputs: Vec<&[ProcessId]> = req
            .inputs
            .iter()
            .map(|n| registry.get(n).map(|s| s.members()))
            .collect::<Result<_, _>>()?;

        check_unique(new_processes)?;
        check_unique(removal)?;
        if !kind.adds_processes() && !new_processes.is_empty() {
            return Err(PSetOpError::BadParams(format!(
                "{kind} takes no new processes"
            )));
        }
        if !kind.removes_processes() && !removal.is_empty() {
            return Err(PSetOpError::BadParams(format!(
                "{kind} takes no removal selection"
            )));
        }
        if kind.adds_processes() {
            let existing: HashSet<ProcessId> =
                inputs.iter().flat_map(|s| s.iter().copied()).collect();
            if let Some(&p) = new_processes.iter().find(|p| existing.contains(p)) {
                return Err(PSetError::DuplicateMember(p).into());
            }
        }
        if kind.removes_processes() {
            let pool: HashSet<ProcessId> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
            if let Some(&p) = removal.iter().find(|p| !pool.contains(p)) {
                return Err(PSetOpError::RemovalNotSubset(p));
            }
        }

        let sized = |expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(PSetOpError::SizeMismatch { expected, actual })
            }
        };
        let attrs = req.col.attrs();
        let delta = match kind {
            PSetOpKind::Add | PSetOpKind::Grow | PSetOpKind::Replace => new_processes.len(),
            PSetOpKind::Sub | PSetOpKind::Shrink => removal.len(),
            _ => 0,
        };
        let delta_u32 = u32::try_from(delta).unwrap_or(u32::MAX);
        if kind.is_resource_op() && (delta == 0 || !attrs.is_valid_grant(delta_u32)) {
            return Err(PSetOpError::GrantOutOfBounds {
                op,
                delta: delta_u32,
            });
        }

        let memberships: Vec<Vec<ProcessId>> = match kind {
            PSetOpKind::Add => {
                let sizes = req.output_sizes();
                sized(sizes.iter().sum(), new_processes.len())?;
                pset::split(new_processes, &sizes)?
            }
            PSetOpKind::Sub => {
                let sizes = req.output_sizes();
                sized(sizes.iter().sum(), removal.len())?;
                pset::split(removal, &sizes)?
            }
            PSetOpKind::Grow => {
                let grown = pset::union(&[inputs[0], new_processes])?;
                vec![new_processes.to_vec(), grown]
            }
            PSetOpKind::Shrink => {
                let shrunk = pset::difference(&[inputs[0], removal])?;
                vec![removal.to_vec(), shrunk]
            }
            PSetOpKind::Replace => {
                sized(new_processes.len(), removal.len())?;
                let kept = pset::difference(&[inputs[0], removal])?;
                let replaced = pset::union(&[kept.as_slice(), new_processes])?;
                vec![new_processes.to_vec(), removal.to_vec(), replaced]
            }
            PSetOpKind::Split => pset::split(inputs[0], &req.params.counts)?,
            PSetOpKind::Union => vec![pset::union(&inputs)?],
            PSetOpKind::Difference => vec![pset::difference(&inputs)?],
            PSetOpKind::Intersection => vec![pset::intersection(&inputs)?],
            PSetOpKind::Null => unreachable!("NULL is rejected at specify"),
        };

        let names: Vec<PSetName> = (0..memberships.len())
            .map(|k| PSetName::rm_output(op, k))
            .collect();
        if let Some(taken) = names.iter().find(|n| registry.contains(n)) {
            return Err(PSetError::DuplicateName(taken.clone()).into());
        }
        for (name, members) in names.iter().zip(memberships) {
            registry.create(name.clone(), members, Some(op), tick)?;
        }

        let rec = self.records.get_mut(&op).expect("checked above");
        rec.state = OpState::ExecutedPending;
        rec.outputs = names.clone();
        rec.granted_delta = Some(delta_u32);
        rec.decide_tick = Some(tick);
        Ok(names)
    }

    /// Oldest pending operation whose inputs or outputs include `pset`.
    pub fn query(
        &self,
        pset: &PSetName,
        registry: &PSetRegistry,
    ) -> Result<QueryResult, PSetOpError> {
        if !registry.contains(pset) {
            return Err(PSetOpError::UnknownPSet(pset.clone()));
        }
        Ok(self
            .records
            .values()
            .find(|r| r.state == OpState::ExecutedPending && r.touches(pset))
            .map(|r| QueryResult {
                kind: r.kind(),
                op: Some(r.op_id()),
                outputs: r.outputs.clone(),
            })
            .unwrap_or_else(QueryResult::null))
    }

    /// Acknowledge a pending operation. Returns the processes to terminate.
    pub fn complete(
        &mut self,
        op: OpId,
        registry: &PSetRegistry,
        tick: Tick,
    ) -> Result<CompletionEffect, PSetOpError> {
        let rec = self.record_in(op, OpState::ExecutedPending)?;
        let mut terminate = Vec::new();
        for name in rec.removal_outputs() {
            terminate.extend_from_slice(registry.get(name)?.members());
        }
        let rec = self.records.get_mut(&op).expect("checked above");
        rec.state = OpState::Completed;
        rec.complete_tick = Some(tick);
        Ok(CompletionEffect { terminate })
    }

    pub fn deny(&mut self, op: OpId, reason: DenyReason, tick: Tick) -> Result<(), PSetOpError> {
        self.record_in(op, OpState::Requested)?;
        let rec = self.records.get_mut(&op).expect("checked above");
        rec.state = OpState::Denied;
        rec.deny_reason = Some(reason);
        rec.decide_tick = Some(tick);
        Ok(())
    }
}
