//! Independent re-check of a recorded trace.
//!
//! The checker rebuilds PSets, operations, processes, slots and the data
//! store purely from trace records and validates every record against that
//! reconstruction. It shares no state with the simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::cluster::{ProcState, SlotRef};
use crate::col::ColAttributes;
use crate::datastore::{LookupId, Publisher, MAX_VALUE_BYTES};
use crate::pset::{self, OpId, PSetName, ProcessId};
use crate::psetop::{Initiator, OpState, PSetOpKind};
use crate::scheduler::{ControlKind, ControlTree};
use crate::Tick;

use super::trace::{
    DataEvent, DecisionEvent, LookupOutcome, MetricEvent, OutputSet, PSetOpEvent, ProcessEvent,
    Trace, TraceBody, TraceError, TraceRecord,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayReport {
    Pass { records: usize },
    Violation { line: usize, message: String },
}

impl ReplayReport {
    pub fn is_pass(&self) -> bool {
        matches!(self, ReplayReport::Pass { .. })
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayReport::Pass { records } => write!(f, "PASS ({records} records)"),
            ReplayReport::Violation { line, message } => {
                write!(f, "VIOLATION at line {line}: {message}")
            }
        }
    }
}

/// Parse and check trace text. Line numbers in the report refer to `text`.
pub fn replay_text(text: &str) -> Result<ReplayReport, TraceError> {
    let trace = Trace::parse(text)?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    Ok(check(trace.records(), |i| lines[i]))
}

/// Check an in-memory trace; line `n` is the n-th record, counting from 1.
pub fn replay_trace(trace: &Trace) -> ReplayReport {
    check(trace.records(), |i| i + 1)
}

fn check(records: &[TraceRecord], line_of: impl Fn(usize) -> usize) -> ReplayReport {
    let mut c = Checker::default();
    for (i, r) in records.iter().enumerate() {
        if let Err(message) = c.record(i, r) {
            return ReplayReport::Violation {
                line: line_of(i),
                message,
            };
        }
    }
    if !c.ended {
        return ReplayReport::Violation {
            line: records.len().max(1),
            message: "trace ends without run_end".into(),
        };
    }
    ReplayReport::Pass {
        records: records.len(),
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    nodes: u32,
    slots_per_node: u32,
    mem_per_node: Option<u64>,
}

#[derive(Debug)]
struct Proc {
    job: String,
    slot: SlotRef,
    mem: u64,
    state: ProcState,
}

#[derive(Debug)]
struct Op {
    kind: PSetOpKind,
    inputs: Vec<PSetName>,
    counts: Vec<usize>,
    attrs: ColAttributes,
    initiator: Initiator,
    job: String,
    state: OpState,
    outputs: Vec<PSetName>,
    granted: Option<u32>,
}

#[derive(Debug, Default)]
struct Checker {
    shape: Option<Shape>,
    last: Option<(Tick, u64)>,
    procs: BTreeMap<ProcessId, Proc>,
    slots: BTreeMap<SlotRef, ProcessId>,
    psets: BTreeMap<PSetName, Vec<ProcessId>>,
    pset_job: BTreeMap<PSetName, String>,
    ops: BTreeMap<OpId, Op>,
    /// Members of removal outputs whose op has not completed yet.
    guarded: BTreeMap<ProcessId, OpId>,
    store: BTreeMap<(PSetName, String), (Tick, Publisher, String)>,
    parked: BTreeMap<LookupId, (PSetName, String)>,
    tick_records: u64,
    occupied_sum: u64,
    ended: bool,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn expected_outputs(op: &Op) -> usize {
    match op.kind {
        PSetOpKind::Grow | PSetOpKind::Shrink => 2,
        PSetOpKind::Replace => 3,
        PSetOpKind::Union | PSetOpKind::Difference | PSetOpKind::Intersection => 1,
        PSetOpKind::Split => op.counts.len(),
        PSetOpKind::Add | PSetOpKind::Sub => op.attrs.output_sizes.as_ref().map_or(1, Vec::len),
        PSetOpKind::Null => 0,
    }
}

fn as_set(v: &[ProcessId]) -> BTreeSet<ProcessId> {
    v.iter().copied().collect()
}

impl Checker {
    fn record(&mut self, index: usize, r: &TraceRecord) -> Result<(), String> {
        ensure(r.seq == index as u64, || {
            format!("sequence number {} where {index} was expected", r.seq)
        })?;
        if let Some(prev) = self.last {
            ensure((r.tick, r.seq) > prev, || {
                "records out of (tick, seq) order".into()
            })?;
        }
        self.last = Some((r.tick, r.seq));
        ensure(!self.ended, || "record after run_end".into())?;
        if self.shape.is_none()
            && !matches!(r.body, TraceBody::Metric(MetricEvent::RunStart { .. }))
        {
            return Err("trace must start with run_start".into());
        }
        match &r.body {
            TraceBody::PSetOp(e) => self.psetop(e),
            TraceBody::Process(e) => self.process(e),
            TraceBody::Data(e) => self.data(r.tick, e),
            TraceBody::Decision(e) => self.decision(e),
            TraceBody::Metric(e) => self.metric(e),
        }
    }

    fn members(&self, name: &PSetName) -> Result<&[ProcessId], String> {
        if name.is_zero() {
            return Ok(&[]);
        }
        self.psets
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| format!("unknown pset `{name}`"))
    }

    fn op(&self, op: OpId) -> Result<&Op, String> {
        self.ops
            .get(&op)
            .ok_or_else(|| format!("unknown operation {op}"))
    }

    fn psetop(&mut self, e: &PSetOpEvent) -> Result<(), String> {
        match e {
            PSetOpEvent::PsetCreated { name, members, job } => {
                ensure(!self.psets.contains_key(name) && !name.is_zero(), || {
                    format!("pset `{name}` created twice")
                })?;
                for p in members {
                    ensure(self.procs.contains_key(p), || {
                        format!("unknown process {p}")
                    })?;
                }
                ensure(as_set(members).len() == members.len(), || {
                    format!("duplicate member in `{name}`")
                })?;
                self.psets.insert(name.clone(), members.clone());
                self.pset_job.insert(name.clone(), job.clone());
            }
            PSetOpEvent::Specified {
                op,
                kind,
                inputs,
                counts,
                initiator,
                col,
                job,
            } => {
                ensure(!self.ops.contains_key(op), || {
                    format!("operation {op} specified twice")
                })?;
                ensure(*kind != PSetOpKind::Null && !inputs.is_empty(), || {
                    format!("operation {op} has no inputs or is NULL")
                })?;
                for i in inputs {
                    self.members(i)?;
                }
                let attrs =
                    ColAttributes::parse(col).map_err(|e| format!("operation {op}: {e}"))?;
                self.ops.insert(
                    *op,
                    Op {
                        kind: *kind,
                        inputs: inputs.clone(),
                        counts: counts.clone(),
                        attrs,
                        initiator: *initiator,
                        job: job.clone(),
                        state: OpState::Requested,
                        outputs: Vec::new(),
                        granted: None,
                    },
                );
            }
            PSetOpEvent::Rejected { .. } => {}
            PSetOpEvent::Transition {
                op,
                from,
                to,
                reason,
                outputs,
            } => {
                let state = self.op(*op)?.state;
                ensure(state == *from, || {
                    format!("operation {op} is {state:?}, transition claims {from:?}")
                })?;
                ensure(from.can_transition_to(*to), || {
                    format!("illegal transition {from:?} -> {to:?} for operation {op}")
                })?;
                match to {
                    OpState::ExecutedPending => self.executed(*op, outputs)?,
                    OpState::Completed => {
                        self.guarded.retain(|_, g| g != op);
                    }
                    OpState::Denied => ensure(reason.is_some(), || {
                        format!("denial of {op} without a reason")
                    })?,
                    OpState::Requested => {}
                }
                if *to != OpState::ExecutedPending {
                    ensure(outputs.is_empty(), || format!("{to:?} carries outputs"))?;
                }
                self.ops.get_mut(op).expect("checked").state = *to;
            }
            PSetOpEvent::Queried {
                pset,
                kind,
                op,
                outputs,
                ..
            } => {
                self.members(pset)?;
                let expect = self
                    .ops
                    .iter()
                    .find(|(_, o)| {
                        o.state == OpState::ExecutedPending
                            && (o.inputs.contains(pset) || o.outputs.contains(pset))
                    })
                    .map(|(id, o)| (Some(*id), o.kind, o.outputs.clone()))
                    .unwrap_or((None, PSetOpKind::Null, Vec::new()));
                let got = (*op, *kind, outputs.clone());
                ensure(got == expect, || {
                    format!("query on `{pset}` answered {got:?}, oldest pending is {expect:?}")
                })?;
            }
        }
        Ok(())
    }

    /// Output formulas and cardinality of an execution.
    fn executed(&mut self, op: OpId, outputs: &[OutputSet]) -> Result<(), String> {
        let o = self.op(op)?;
        let n = expected_outputs(o);
        ensure(outputs.len() == n, || {
            format!(
                "{} produced {} outputs, expected {n}",
                o.kind,
                outputs.len()
            )
        })?;
        for out in outputs {
            ensure(!self.psets.contains_key(&out.name), || {
                format!("output `{}` already exists", out.name)
            })?;
            ensure(as_set(&out.members).len() == out.members.len(), || {
                format!("duplicate member in `{}`", out.name)
            })?;
        }
        let inputs: Vec<&[ProcessId]> = o
            .inputs
            .iter()
            .map(|i| self.members(i))
            .collect::<Result<_, _>>()?;
        let all_inputs: BTreeSet<ProcessId> =
            inputs.iter().flat_map(|s| s.iter().copied()).collect();
        let outs: Vec<&[ProcessId]> = outputs.iter().map(|o| o.members.as_slice()).collect();
        let fresh = |set: &[ProcessId]| -> Result<(), String> {
            for p in set {
                ensure(!all_inputs.contains(p), || {
                    format!("new process {p} already in input")
                })?;
                let state = self.procs.get(p).map(|r| r.state);
                ensure(state == Some(ProcState::Launching), || {
                    format!("new process {p} is not freshly launched")
                })?;
            }
            Ok(())
        };
        let within = |set: &[ProcessId]| -> Result<(), String> {
            for p in set {
                ensure(all_inputs.contains(p), || {
                    format!("removed process {p} not in input")
                })?;
            }
            Ok(())
        };
        let same = |got: &[ProcessId], want: Vec<ProcessId>, what: &str| {
            ensure(got == want.as_slice(), || {
                format!("{what}: got {got:?}, expected {want:?}")
            })
        };
        let algebra = |e: pset::AlgebraError| e.to_string();
        let sizes = |o: &Op| -> Vec<usize> {
            match &o.attrs.output_sizes {
                Some(s) => s.iter().map(|&x| x as usize).collect(),
                None => vec![o.attrs.num_delta as usize],
            }
        };
        let mut removed: Vec<ProcessId> = Vec::new();
        let delta = match o.kind {
            PSetOpKind::Grow => {
                fresh(outs[0])?;
                same(
                    outs[1],
                    pset::union(&[inputs[0], outs[0]]).map_err(algebra)?,
                    "GROW result",
                )?;
                Some(outs[0].len())
            }
            PSetOpKind::Shrink => {
                within(outs[0])?;
                same(
                    outs[1],
                    pset::difference(&[inputs[0], outs[0]]).map_err(algebra)?,
                    "SHRINK result",
                )?;
                removed.extend_from_slice(outs[0]);
                Some(outs[0].len())
            }
            PSetOpKind::Replace => {
                fresh(outs[0])?;
                within(outs[1])?;
                ensure(outs[0].len() == outs[1].len(), || {
                    "REPLACE sizes differ".into()
                })?;
                let kept = pset::difference(&[inputs[0], outs[1]]).map_err(algebra)?;
                same(
                    outs[2],
                    pset::union(&[kept.as_slice(), outs[0]]).map_err(algebra)?,
                    "REPLACE result",
                )?;
                removed.extend_from_slice(outs[1]);
                Some(outs[0].len())
            }
            PSetOpKind::Add | PSetOpKind::Sub => {
                let want = sizes(o);
                let got: Vec<usize> = outs.iter().map(|s| s.len()).collect();
                ensure(got == want, || {
                    format!("{} output sizes {got:?}, expected {want:?}", o.kind)
                })?;
                for s in &outs {
                    if o.kind == PSetOpKind::Add {
                        fresh(s)?;
                    } else {
                        within(s)?;
                        removed.extend_from_slice(s);
                    }
                }
                let all: Vec<ProcessId> = outs.iter().flat_map(|s| s.iter().copied()).collect();
                ensure(as_set(&all).len() == all.len(), || "outputs overlap".into())?;
                Some(all.len())
            }
            PSetOpKind::Split => {
                let want = pset::split(inputs[0], &o.counts).map_err(algebra)?;
                for (k, w) in want.into_iter().enumerate() {
                    same(outs[k], w, "SPLIT output")?;
                }
                None
            }
            PSetOpKind::Union => {
                same(
                    outs[0],
                    pset::union(&inputs).map_err(algebra)?,
                    "UNION result",
                )?;
                None
            }
            PSetOpKind::Difference => {
                same(
                    outs[0],
                    pset::difference(&inputs).map_err(algebra)?,
                    "DIFFERENCE result",
                )?;
                None
            }
            PSetOpKind::Intersection => {
                same(
                    outs[0],
                    pset::intersection(&inputs).map_err(algebra)?,
                    "INTERSECTION result",
                )?;
                None
            }
            PSetOpKind::Null => return Err("NULL cannot execute".into()),
        };
        if let Some(d) = delta {
            let d = d as u32;
            ensure(d > 0 && o.attrs.is_valid_grant(d), || {
                format!("delta {d} of operation {op} outside COL bounds")
            })?;
            ensure(o.granted == Some(d), || {
                format!(
                    "operation {op} executed with delta {d}, granted {:?}",
                    o.granted
                )
            })?;
        }
        let job = o.job.clone();
        for out in outputs {
            self.psets.insert(out.name.clone(), out.members.clone());
            self.pset_job.insert(out.name.clone(), job.clone());
        }
        for p in removed {
            self.guarded.insert(p, op);
        }
        self.ops.get_mut(&op).expect("checked").outputs =
            outputs.iter().map(|o| o.name.clone()).collect();
        Ok(())
    }

    fn proc_state(&self, pid: ProcessId) -> Result<ProcState, String> {
        self.procs
            .get(&pid)
            .map(|p| p.state)
            .ok_or_else(|| format!("unknown process {pid}"))
    }

    fn move_proc(&mut self, pid: ProcessId, from: ProcState, to: ProcState) -> Result<(), String> {
        let state = self.proc_state(pid)?;
        ensure(state == from, || {
            format!("process {pid} goes {state:?} -> {to:?}")
        })?;
        self.procs.get_mut(&pid).expect("checked").state = to;
        Ok(())
    }

    fn process(&mut self, e: &ProcessEvent) -> Result<(), String> {
        match e {
            ProcessEvent::JobArrived { .. }
            | ProcessEvent::JobStarted { .. }
            | ProcessEvent::JobFinished { .. } => {}
            ProcessEvent::Launching {
                pid,
                job,
                node,
                slot,
                mem,
            } => {
                let shape = self.shape.expect("checked at start");
                ensure(!self.procs.contains_key(pid), || {
                    format!("process {pid} launched twice")
                })?;
                ensure(*node < shape.nodes && *slot < shape.slots_per_node, || {
                    format!("slot ({node},{slot}) does not exist")
                })?;
                let at = SlotRef {
                    node: *node,
                    slot: *slot,
                };
                if let Some(other) = self.slots.get(&at) {
                    return Err(format!(
                        "slot double occupancy: {pid} placed on {at} held by {other}"
                    ));
                }
                if let Some(limit) = shape.mem_per_node {
                    let used: u64 = self
                        .procs
                        .values()
                        .filter(|p| p.slot.node == *node && p.state.is_live())
                        .map(|p| p.mem)
                        .sum();
                    ensure(used + mem <= limit, || {
                        format!("node {node} memory {} MiB exceeds {limit} MiB", used + mem)
                    })?;
                }
                self.slots.insert(at, *pid);
                self.procs.insert(
                    *pid,
                    Proc {
                        job: job.clone(),
                        slot: at,
                        mem: *mem,
                        state: ProcState::Launching,
                    },
                );
            }
            ProcessEvent::Running { pid } => {
                self.move_proc(*pid, ProcState::Launching, ProcState::Running)?
            }
            ProcessEvent::Terminating { pid } => {
                if let Some(op) = self.guarded.get(pid) {
                    return Err(format!(
                        "process {pid} terminates before its removal op {op} completed"
                    ));
                }
                self.move_proc(*pid, ProcState::Running, ProcState::Terminating)?
            }
            ProcessEvent::Terminated { pid } => {
                self.move_proc(*pid, ProcState::Terminating, ProcState::Terminated)?;
                let slot = self.procs[pid].slot;
                self.slots.remove(&slot);
            }
        }
        Ok(())
    }

    fn data(&mut self, tick: Tick, e: &DataEvent) -> Result<(), String> {
        match e {
            DataEvent::Published {
                pset,
                key,
                value,
                publisher,
            } => {
                self.members(pset)?;
                ensure(!pset.is_zero(), || "publish to the empty pset".into())?;
                let bytes = hex::decode(value).map_err(|e| format!("bad hex value: {e}"))?;
                ensure(bytes.len() <= MAX_VALUE_BYTES, || {
                    "value exceeds 64 KiB".into()
                })?;
                let slot = (pset.clone(), key.clone());
                let newer = self
                    .store
                    .get(&slot)
                    .is_none_or(|(t, p, _)| (*t, *p) <= (tick, *publisher));
                if newer {
                    self.store.insert(slot, (tick, *publisher, value.clone()));
                }
            }
            DataEvent::Lookup {
                pset,
                key,
                wait,
                outcome,
                value,
                lookup,
                ..
            } => {
                self.members(pset)?;
                let stored = self.store.get(&(pset.clone(), key.clone())).map(|s| &s.2);
                match outcome {
                    LookupOutcome::Found => {
                        ensure(stored.is_some() && stored == value.as_ref(), || {
                            format!("lookup of `{key}` found {value:?}, store holds {stored:?}")
                        })?
                    }
                    LookupOutcome::NotFound => {
                        ensure(stored.is_none() && (!wait || pset.is_zero()), || {
                            format!("lookup of `{key}` reported not found")
                        })?
                    }
                    LookupOutcome::Parked => {
                        ensure(stored.is_none() && *wait, || {
                            format!("lookup of `{key}` parked wrongly")
                        })?;
                        let id = lookup.ok_or("parked lookup without id")?;
                        ensure(!self.parked.contains_key(&id), || {
                            format!("lookup id {id:?} reused")
                        })?;
                        self.parked.insert(id, (pset.clone(), key.clone()));
                    }
                }
            }
            DataEvent::Resolved {
                lookup,
                pset,
                key,
                value,
                ..
            } => {
                let parked = self
                    .parked
                    .remove(lookup)
                    .ok_or_else(|| format!("resolution of unknown lookup {lookup:?}"))?;
                ensure(parked == (pset.clone(), key.clone()), || {
                    format!("lookup {lookup:?} resolved for a different key")
                })?;
                let stored = self.store.get(&parked).map(|s| &s.2);
                ensure(stored == Some(value), || {
                    format!("lookup {lookup:?} resolved to {value}, store holds {stored:?}")
                })?;
            }
            DataEvent::Failed { .. } => {}
        }
        Ok(())
    }

    fn decision(&mut self, e: &DecisionEvent) -> Result<(), String> {
        match e {
            DecisionEvent::Grant { op, delta } => {
                let o = self.op(*op)?;
                ensure(o.state == OpState::Requested, || {
                    format!("grant for operation {op} in state {:?}", o.state)
                })?;
                if o.kind.is_resource_op() {
                    ensure(*delta > 0 && o.attrs.is_valid_grant(*delta), || {
                        format!("grant {delta} for operation {op} outside COL bounds")
                    })?;
                }
                self.ops.get_mut(op).expect("checked").granted = Some(*delta);
            }
            DecisionEvent::Deny { op, .. } => {
                let o = self.op(*op)?;
                ensure(o.state == OpState::Requested, || {
                    format!("denial of operation {op} in state {:?}", o.state)
                })?;
            }
            DecisionEvent::Initiate { op, kind, .. } => {
                let o = self.op(*op)?;
                ensure(o.initiator == Initiator::System && o.kind == *kind, || {
                    format!("initiate for operation {op} that is not system-initiated")
                })?;
            }
        }
        Ok(())
    }

    fn metric(&mut self, e: &MetricEvent) -> Result<(), String> {
        match e {
            MetricEvent::RunStart {
                nodes,
                slots_per_node,
                mem_per_node,
                ..
            } => {
                ensure(self.shape.is_none(), || "second run_start".into())?;
                self.shape = Some(Shape {
                    nodes: *nodes,
                    slots_per_node: *slots_per_node,
                    mem_per_node: *mem_per_node,
                });
            }
            MetricEvent::Tick {
                occupied,
                total,
                live,
            } => {
                let shape = self.shape.expect("checked at start");
                let want_total = u64::from(shape.nodes) * u64::from(shape.slots_per_node);
                ensure(*total == want_total, || {
                    format!("total {total}, expected {want_total}")
                })?;
                let slots = self.slots.len() as u64;
                let live_now = self.procs.values().filter(|p| p.state.is_live()).count() as u64;
                ensure(
                    *occupied == slots && *live == live_now && live_now == slots,
                    || {
                        format!(
                            "conservation: record says {occupied} occupied / {live} live, \
                         reconstruction has {slots} occupied / {live_now} live"
                        )
                    },
                )?;
                self.tick_records += 1;
                self.occupied_sum += occupied;
                self.check_tree()?;
            }
            MetricEvent::RunEnd {
                ticks,
                occupied_slot_ticks,
                total_slots,
            } => {
                let shape = self.shape.expect("checked at start");
                ensure(
                    *ticks == self.tick_records
                        && *occupied_slot_ticks == self.occupied_sum
                        && *total_slots == u64::from(shape.nodes) * u64::from(shape.slots_per_node),
                    || {
                        format!(
                            "run_end totals ({ticks}, {occupied_slot_ticks}) disagree with \
                             tick records ({}, {})",
                            self.tick_records, self.occupied_sum
                        )
                    },
                )?;
                self.ended = true;
            }
        }
        Ok(())
    }

    /// Rebuild the control tree from the reconstruction and validate it.
    fn check_tree(&self) -> Result<(), String> {
        let shape = self.shape.expect("checked at start");
        let all: BTreeSet<SlotRef> = (0..shape.nodes)
            .flat_map(|node| (0..shape.slots_per_node).map(move |slot| SlotRef { node, slot }))
            .collect();
        let mut tree = ControlTree::new("rm", all);
        let mut by_job: BTreeMap<&str, BTreeSet<SlotRef>> = BTreeMap::new();
        for p in self.procs.values().filter(|p| p.state.is_live()) {
            by_job.entry(&p.job).or_default().insert(p.slot);
        }
        let mut pm = BTreeMap::new();
        for (job, slots) in by_job {
            let id = tree
                .add_child(tree.root(), ControlKind::ProcessManager, job, slots)
                .map_err(|e| e.to_string())?;
            pm.insert(job, id);
        }
        for (name, members) in &self.psets {
            let slots: BTreeSet<SlotRef> = members
                .iter()
                .filter_map(|p| self.procs.get(p))
                .filter(|p| p.state.is_live())
                .map(|p| p.slot)
                .collect();
            if slots.is_empty() {
                continue;
            }
            let job = self
                .pset_job
                .get(name)
                .map(String::as_str)
                .unwrap_or_default();
            let parent = *pm.get(job).ok_or_else(|| {
                format!("pset `{name}` has live members but job `{job}` has none")
            })?;
            tree.add_child(parent, ControlKind::Application, name.to_string(), slots)
                .map_err(|e| e.to_string())?;
        }
        tree.validate().map_err(|e| format!("control tree: {e}"))
    }
}
