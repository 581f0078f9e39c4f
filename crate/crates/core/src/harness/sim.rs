//! Deterministic tick-driven event loop.
//!
//! Per tick: arrivals and job starts, job polling and work, phase-boundary
//! actions, parked lookups, the scheduler (on its interval), then process
//! lifecycle latencies. Everything observable is appended to the trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::cluster::{Cluster, ClusterError, ProcState, SlotRef};
use crate::col::{amdahl_speedup, ColObject};
use crate::datastore::{DataError, DataStore, Lookup, Publisher};
use crate::pset::{OpId, PSetName, PSetRegistry, ProcessId};
use crate::psetop::{
    Initiator, OpParams, OpSpec, OpState, OpTable, PSetOpError, PSetOpKind, PSetOpRecord,
};
use crate::scheduler::{
    initiate_system_op, schedule_tick, ControlKind, ControlTree, Decision, MalleableView,
    RequestView, SchedulerView,
};
use crate::Tick;

use super::metrics::{JobMetrics, Metrics, OpMetrics};
use super::scenario::{Action, JobSpec, Scenario, ScenarioError, CURRENT};
use super::trace::{
    DataEvent, DecisionEvent, LookupOutcome, MetricEvent, OutputSet, PSetOpEvent, ProcessEvent,
    Trace, TraceBody,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("tick {tick}: invariant violated: {message}")]
    Invariant { tick: Tick, message: String },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: Metrics,
}

/// Validate and run a scenario to completion or its horizon.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario);
    sim.run()?;
    Ok(sim.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    NotArrived,
    Queued,
    Running,
    Finished,
}

#[derive(Debug, Clone)]
struct Job {
    status: Status,
    current: Option<PSetName>,
    aux: Vec<PSetName>,
    phase: usize,
    work: f64,
    actions: VecDeque<Action>,
    outstanding: BTreeSet<OpId>,
    start_tick: Option<Tick>,
    finish_tick: Option<Tick>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    tick: Tick,
    cluster: Cluster,
    registry: PSetRegistry,
    table: OpTable,
    store: DataStore,
    jobs: Vec<Job>,
    start_queue: Vec<usize>,
    owner: BTreeMap<OpId, usize>,
    trace: Trace,
    occupied: Vec<u64>,
}

fn is_resize(kind: PSetOpKind) -> bool {
    matches!(
        kind,
        PSetOpKind::Grow | PSetOpKind::Shrink | PSetOpKind::Replace
    )
}

impl<'a> Sim<'a> {
    fn new(sc: &'a Scenario) -> Self {
        let c = &sc.cluster;
        let cluster = Cluster::new(
            c.nodes,
            c.slots_per_node,
            c.mem_per_node.unwrap_or(u64::MAX),
            c.launch_latency,
            c.term_latency,
        )
        .with_launch_jitter(c.launch_jitter, sc.seed);
        let jobs = sc
            .jobs
            .iter()
            .map(|_| Job {
                status: Status::NotArrived,
                current: None,
                aux: Vec::new(),
                phase: 0,
                work: 0.0,
                actions: VecDeque::new(),
                outstanding: BTreeSet::new(),
                start_tick: None,
                finish_tick: None,
            })
            .collect();
        Sim {
            sc,
            tick: 0,
            cluster,
            registry: PSetRegistry::new(),
            table: OpTable::new(),
            store: DataStore::new(),
            jobs,
            start_queue: Vec::new(),
            owner: BTreeMap::new(),
            trace: Trace::new(),
            occupied: Vec::new(),
        }
    }

    fn emit(&mut self, body: TraceBody) {
        self.trace.push(self.tick, body);
    }

    fn invariant(&self, message: impl Into<String>) -> SimError {
        SimError::Invariant {
            tick: self.tick,
            message: message.into(),
        }
    }

    fn op_err(&self, e: PSetOpError) -> SimError {
        self.invariant(e.to_string())
    }

    fn cluster_err(&self, e: ClusterError) -> SimError {
        self.invariant(e.to_string())
    }

    fn spec(&self, j: usize) -> &'a JobSpec {
        &self.sc.jobs[j]
    }

    fn run(&mut self) -> Result<(), SimError> {
        let c = &self.sc.cluster;
        self.emit(TraceBody::Metric(MetricEvent::RunStart {
            seed: self.sc.seed,
            horizon: self.sc.horizon,
            nodes: c.nodes,
            slots_per_node: c.slots_per_node,
            mem_per_node: c.mem_per_node,
            launch_latency: c.launch_latency,
            term_latency: c.term_latency,
            policy: self.sc.policy.name,
        }));
        for tick in 0..self.sc.horizon {
            self.tick = tick;
            self.step()?;
            let done = self.jobs.iter().all(|j| j.status == Status::Finished);
            if done && self.cluster.live_count() == 0 {
                break;
            }
        }
        let ticks = self.occupied.len() as Tick;
        let total = self.cluster.total_slots() as u64;
        let occupied_slot_ticks = self.occupied.iter().sum();
        self.emit(TraceBody::Metric(MetricEvent::RunEnd {
            ticks,
            occupied_slot_ticks,
            total_slots: total,
        }));
        Ok(())
    }

    fn step(&mut self) -> Result<(), SimError> {
        self.arrivals();
        self.start_jobs()?;
        for j in 0..self.jobs.len() {
            if self.jobs[j].status == Status::Running {
                self.poll(j)?;
                self.advance_work(j);
                self.fire_actions(j);
                self.maybe_finish(j);
            }
        }
        self.resolve_lookups();
        if self.tick.is_multiple_of(self.sc.policy.tick_interval) {
            self.schedule()?;
        }
        let events = self.cluster.advance(self.tick);
        self.log_process_events(&events);
        self.cluster
            .check_invariants()
            .map_err(|m| self.invariant(m))?;
        let occupied = self.cluster.occupied_slots() as u64;
        self.occupied.push(occupied);
        self.emit(TraceBody::Metric(MetricEvent::Tick {
            occupied,
            total: self.cluster.total_slots() as u64,
            live: self.cluster.live_count() as u64,
        }));
        Ok(())
    }

    fn arrivals(&mut self) {
        for j in 0..self.jobs.len() {
            if self.jobs[j].status == Status::NotArrived && self.spec(j).arrival_tick <= self.tick {
                self.jobs[j].status = Status::Queued;
                self.start_queue.push(j);
                let job = self.spec(j).id.clone();
                self.emit(TraceBody::Process(ProcessEvent::JobArrived { job }));
            }
        }
        let sc = self.sc;
        self.start_queue
            .sort_by_key(|&j| (!sc.jobs[j].urgent, sc.jobs[j].arrival_tick, j));
    }

    /// Start queued jobs in order; the head blocks everyone behind it.
    fn start_jobs(&mut self) -> Result<(), SimError> {
        while let Some(&j) = self.start_queue.first() {
            let spec = self.spec(j);
            let mem = spec.defaults().mem();
            let pids = match self.cluster.allocate(
                spec.initial_procs as usize,
                mem,
                self.sc.cluster.placement,
                j as u32,
                self.tick,
            ) {
                Ok(p) => p,
                Err(_) => break,
            };
            self.start_queue.remove(0);
            self.log_launches(&pids, j);
            let name = spec.pset_name();
            let tick = self.tick;
            self.registry
                .create(name.clone(), pids.clone(), None, tick)
                .map_err(|e| SimError::Invariant {
                    tick,
                    message: e.to_string(),
                })?;
            self.emit(TraceBody::PSetOp(PSetOpEvent::PsetCreated {
                name: name.clone(),
                members: pids,
                job: spec.id.clone(),
            }));
            self.emit(TraceBody::Process(ProcessEvent::JobStarted {
                job: spec.id.clone(),
                pset: name.clone(),
            }));
            let job = &mut self.jobs[j];
            job.status = Status::Running;
            job.current = Some(name);
            job.start_tick = Some(self.tick);
        }
        Ok(())
    }

    fn log_launches(&mut self, pids: &[ProcessId], j: usize) {
        for &pid in pids {
            let rec = self.cluster.process(pid).expect("just allocated");
            let ev = ProcessEvent::Launching {
                pid,
                job: self.spec(j).id.clone(),
                node: rec.slot.node,
                slot: rec.slot.slot,
                mem: rec.mem_mib,
            };
            self.emit(TraceBody::Process(ev));
        }
    }

    fn log_process_events(&mut self, events: &[crate::cluster::ProcessEvent]) {
        for e in events {
            let ev = match e.state {
                ProcState::Launching => continue,
                ProcState::Running => ProcessEvent::Running { pid: e.pid },
                ProcState::Terminating => ProcessEvent::Terminating { pid: e.pid },
                ProcState::Terminated => ProcessEvent::Terminated { pid: e.pid },
            };
            self.emit(TraceBody::Process(ev));
        }
    }

    fn running_members(&self, name: &PSetName) -> Vec<ProcessId> {
        self.registry
            .get(name)
            .map(|s| {
                s.members()
                    .iter()
                    .copied()
                    .filter(|&p| self.cluster.state(p) == Some(ProcState::Running))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// PSets the job keeps an eye on, current first.
    fn watch_list(&self, j: usize) -> Vec<PSetName> {
        let job = &self.jobs[j];
        let mut out: Vec<PSetName> = Vec::new();
        let mut push = |n: &PSetName| {
            if !n.is_zero() && !out.contains(n) {
                out.push(n.clone());
            }
        };
        if let Some(c) = &job.current {
            push(c);
        }
        for a in &job.aux {
            push(a);
        }
        for op in &job.outstanding {
            if let Ok(rec) = self.table.get(*op) {
                for i in &rec.request.inputs {
                    push(i);
                }
            }
        }
        out
    }

    fn log_query(&mut self, j: usize, pset: &PSetName) -> Result<Option<OpId>, SimError> {
        let q = self
            .table
            .query(pset, &self.registry)
            .map_err(|e| self.op_err(e))?;
        let op = q.op;
        self.emit(TraceBody::PSetOp(PSetOpEvent::Queried {
            job: self.spec(j).id.clone(),
            pset: pset.clone(),
            kind: q.kind,
            op: q.op,
            outputs: q.outputs,
        }));
        Ok(op)
    }

    /// Reconfiguration point: acknowledge every pending op the job owns.
    fn poll(&mut self, j: usize) -> Result<(), SimError> {
        let table = &self.table;
        self.jobs[j]
            .outstanding
            .retain(|op| table.get(*op).is_ok_and(|r| r.state != OpState::Denied));
        loop {
            let mut acted = false;
            for pset in self.watch_list(j) {
                let q = self
                    .table
                    .query(&pset, &self.registry)
                    .map_err(|e| self.op_err(e))?;
                if q.op.and_then(|op| self.owner.get(&op)) != Some(&j) {
                    continue;
                }
                let mut next = self.log_query(j, &pset)?;
                while let Some(op) = next.filter(|op| self.owner.get(op) == Some(&j)) {
                    self.complete(j, op)?;
                    next = self.log_query(j, &pset)?;
                }
                acted = true;
                break;
            }
            if !acted {
                return Ok(());
            }
        }
    }

    fn complete(&mut self, j: usize, op: OpId) -> Result<(), SimError> {
        let effect = self
            .table
            .complete(op, &self.registry, self.tick)
            .map_err(|e| self.op_err(e))?;
        self.emit(TraceBody::PSetOp(PSetOpEvent::Transition {
            op,
            from: OpState::ExecutedPending,
            to: OpState::Completed,
            reason: None,
            outputs: Vec::new(),
        }));
        let events = self
            .cluster
            .request_termination(&effect.terminate, self.tick);
        self.log_process_events(&events);

        let rec = self.table.get(op).map_err(|e| self.op_err(e))?.clone();
        let job = &mut self.jobs[j];
        job.outstanding.remove(&op);
        let kind = rec.kind();
        if is_resize(kind) && job.current.as_ref() == rec.request.inputs.first() {
            job.current = rec.outputs.last().cloned();
        } else if kind != PSetOpKind::Sub {
            job.aux.extend(rec.outputs.iter().cloned());
        }
        Ok(())
    }

    fn advance_work(&mut self, j: usize) {
        let spec = self.spec(j);
        if !self.jobs[j].actions.is_empty() || self.jobs[j].phase >= spec.phases.len() {
            return;
        }
        let running = match &self.jobs[j].current {
            Some(c) => self.running_members(c).len() as u32,
            None => 0,
        };
        let serial = spec.defaults().amdahl_serial_fraction.unwrap_or(1.0);
        let job = &mut self.jobs[j];
        if running > 0 {
            job.work += amdahl_speedup(serial, running);
        }
        while job.phase < spec.phases.len() && job.work >= spec.phases[job.phase].work {
            job.actions
                .extend(spec.phases[job.phase].actions.iter().cloned());
            job.phase += 1;
            job.work = 0.0;
            if !job.actions.is_empty() {
                break;
            }
        }
    }

    fn resize_outstanding(&self, j: usize) -> bool {
        let job = &self.jobs[j];
        job.outstanding.iter().any(|op| {
            self.table.get(*op).is_ok_and(|r| {
                is_resize(r.kind()) && job.current.as_ref() == r.request.inputs.first()
            })
        })
    }

    fn fire_actions(&mut self, j: usize) {
        while let Some(action) = self.jobs[j].actions.front() {
            let waits = matches!(
                action,
                Action::Grow { .. }
                    | Action::Shrink { .. }
                    | Action::Split { .. }
                    | Action::Union { .. }
            );
            if waits && self.resize_outstanding(j) {
                return;
            }
            let action = self.jobs[j].actions.pop_front().expect("front exists");
            self.fire(j, action);
        }
    }

    fn resolve_name(&self, j: usize, name: &str) -> Option<PSetName> {
        if name == CURRENT {
            self.jobs[j].current.clone()
        } else {
            PSetName::new(name).ok()
        }
    }

    fn rank0(&self, j: usize) -> Publisher {
        self.jobs[j]
            .current
            .as_ref()
            .and_then(|c| self.registry.get(c).ok())
            .and_then(|s| s.members().first().copied())
            .map_or(Publisher::System, Publisher::Process)
    }

    fn fire(&mut self, j: usize, action: Action) {
        let spec = self.spec(j);
        let Some(current) = self.jobs[j].current.clone() else {
            return;
        };
        let (kind, inputs, counts, col) = match action {
            Action::Grow { col } => (PSetOpKind::Grow, vec![current.clone()], vec![], col),
            Action::Shrink { col } => (PSetOpKind::Shrink, vec![current.clone()], vec![], col),
            Action::Add { col } => (PSetOpKind::Add, vec![current.clone()], vec![], col),
            Action::Split { counts } => (
                PSetOpKind::Split,
                vec![current.clone()],
                counts,
                String::new(),
            ),
            Action::Union { names } => {
                let inputs = names
                    .iter()
                    .filter_map(|n| self.resolve_name(j, n))
                    .collect();
                (PSetOpKind::Union, inputs, vec![], String::new())
            }
            Action::Publish { pset, key, value } => {
                self.publish(j, &pset, key, value);
                return;
            }
            Action::Lookup { pset, key, wait } => {
                self.lookup(j, &pset, key, wait);
                return;
            }
        };
        let raw = spec.merged_col(&col);
        let spec_result = ColObject::parse(raw.clone(), current)
            .map_err(|e| e.to_string())
            .and_then(|col| {
                self.table
                    .specify(
                        OpSpec {
                            kind,
                            inputs: inputs.clone(),
                            params: OpParams {
                                counts: counts.clone(),
                            },
                            col,
                            initiator: Initiator::Application,
                        },
                        &self.registry,
                        self.tick,
                    )
                    .map_err(|e| e.to_string())
            });
        let job = spec.id.clone();
        match spec_result {
            Ok(op) => {
                self.owner.insert(op, j);
                self.jobs[j].outstanding.insert(op);
                self.emit(TraceBody::PSetOp(PSetOpEvent::Specified {
                    op,
                    kind,
                    inputs,
                    counts,
                    initiator: Initiator::Application,
                    col: raw,
                    job,
                }));
            }
            Err(error) => {
                self.emit(TraceBody::PSetOp(PSetOpEvent::Rejected {
                    job,
                    kind,
                    error,
                }));
            }
        }
    }

    fn data_failed(&mut self, pset: &str, key: String, error: DataError) {
        self.emit(TraceBody::Data(DataEvent::Failed {
            pset: pset.to_string(),
            key,
            error: error.to_string(),
        }));
    }

    fn publish(&mut self, j: usize, pset: &str, key: String, value: String) {
        let Some(name) = self.resolve_name(j, pset) else {
            return;
        };
        let publisher = self.rank0(j);
        let bytes = value.into_bytes();
        match self.store.publish(
            &self.registry,
            &name,
            &key,
            bytes.clone(),
            publisher,
            self.tick,
        ) {
            Ok(()) => self.emit(TraceBody::Data(DataEvent::Published {
                pset: name,
                key,
                value: hex::encode(bytes),
                publisher,
            })),
            Err(e) => self.data_failed(pset, key, e),
        }
    }

    fn lookup(&mut self, j: usize, pset: &str, key: String, wait: bool) {
        let Some(name) = self.resolve_name(j, pset) else {
            return;
        };
        let requester = self.rank0(j);
        match self
            .store
            .lookup(&self.registry, &name, &key, wait, requester, self.tick)
        {
            Ok(result) => {
                let (outcome, value, lookup) = match result {
                    Lookup::Found(v) => (LookupOutcome::Found, Some(hex::encode(v)), None),
                    Lookup::NotFound => (LookupOutcome::NotFound, None, None),
                    Lookup::Parked(id) => (LookupOutcome::Parked, None, Some(id)),
                };
                self.emit(TraceBody::Data(DataEvent::Lookup {
                    pset: name,
                    key,
                    wait,
                    requester,
                    outcome,
                    value,
                    lookup,
                }));
            }
            Err(e) => self.data_failed(pset, key, e),
        }
    }

    fn resolve_lookups(&mut self) {
        for r in self.store.resolve_parked(self.tick) {
            self.emit(TraceBody::Data(DataEvent::Resolved {
                lookup: r.lookup.id,
                pset: r.lookup.pset,
                key: r.lookup.key,
                value: hex::encode(r.value),
                requester: r.lookup.requester,
            }));
        }
    }

    fn maybe_finish(&mut self, j: usize) {
        let job = &self.jobs[j];
        if job.phase < self.spec(j).phases.len()
            || !job.actions.is_empty()
            || !job.outstanding.is_empty()
        {
            return;
        }
        let live: Vec<ProcessId> = self
            .cluster
            .processes()
            .filter(|p| p.job == j as u32 && p.state.is_live())
            .map(|p| p.pid)
            .collect();
        let events = self.cluster.request_termination(&live, self.tick);
        self.log_process_events(&events);
        let job = &mut self.jobs[j];
        job.status = Status::Finished;
        job.finish_tick = Some(self.tick);
        let id = self.spec(j).id.clone();
        self.emit(TraceBody::Process(ProcessEvent::JobFinished { job: id }));
    }

    fn view(&self) -> SchedulerView {
        let requests = self
            .table
            .requested()
            .map(|r| {
                let first = &r.request.inputs[0];
                let size = self.registry.get(first).map_or(0, |s| s.len());
                let running = self.running_members(first).len();
                RequestView {
                    op: r.op_id(),
                    kind: r.kind(),
                    initiator: r.request.initiator,
                    submit_tick: r.request.submit_tick,
                    inputs: r.request.inputs.clone(),
                    attrs: r.request.col.attrs().clone(),
                    input_size: size,
                    removable: running.min(size.saturating_sub(1)),
                }
            })
            .collect();

        let malleable = (0..self.jobs.len())
            .filter(|&j| self.jobs[j].status == Status::Running && self.spec(j).malleable)
            .filter_map(|j| {
                let job = &self.jobs[j];
                let spec = self.spec(j);
                let target = job.current.clone()?;
                let size = self.registry.get(&target).ok()?.len() as u32;
                let running = self.running_members(&target).len() as u32;
                Some(MalleableView {
                    job: j,
                    target,
                    current: size,
                    grow_room: spec.max_procs().saturating_sub(size),
                    shrink_room: size.saturating_sub(spec.min_procs()).min(running),
                    defaults: spec.defaults(),
                    busy: !job.outstanding.is_empty()
                        || !job.actions.is_empty()
                        || job.phase >= spec.phases.len(),
                })
            })
            .collect();

        SchedulerView {
            tick: self.tick,
            capacity: self.cluster.capacity(),
            placement: self.sc.cluster.placement,
            requests,
            malleable,
            start_queue_len: self.start_queue.len(),
            urgent_deficit: self.urgent_deficit(),
        }
    }

    /// Slots an urgent head-of-queue job still lacks after counting what is
    /// already on its way out.
    fn urgent_deficit(&self) -> u32 {
        let Some(&head) = self.start_queue.first() else {
            return 0;
        };
        let spec = self.spec(head);
        if !spec.urgent {
            return 0;
        }
        let free = self.cluster.free_slots() as u64;
        let leaving = self
            .cluster
            .processes()
            .filter(|p| p.state == ProcState::Terminating)
            .count() as u64;
        let shrinking: u64 = self
            .table
            .records()
            .filter(|r| {
                r.request.initiator == Initiator::System
                    && r.kind().removes_processes()
                    && matches!(r.state, OpState::Requested | OpState::ExecutedPending)
            })
            .map(|r| u64::from(r.request.col.attrs().num_delta))
            .sum();
        u64::from(spec.initial_procs)
            .saturating_sub(free + leaving + shrinking)
            .try_into()
            .unwrap_or(u32::MAX)
    }

    fn schedule(&mut self) -> Result<(), SimError> {
        let view = self.view();
        for decision in schedule_tick(&self.sc.policy, &view) {
            match decision {
                Decision::Grant { op, delta } => self.grant(op, delta)?,
                Decision::Deny { op, reason } => {
                    self.table
                        .deny(op, reason, self.tick)
                        .map_err(|e| self.op_err(e))?;
                    self.emit(TraceBody::Decision(DecisionEvent::Deny { op, reason }));
                    self.emit(TraceBody::PSetOp(PSetOpEvent::Transition {
                        op,
                        from: OpState::Requested,
                        to: OpState::Denied,
                        reason: Some(reason),
                        outputs: Vec::new(),
                    }));
                }
                Decision::Initiate {
                    kind,
                    job,
                    target,
                    col,
                } => {
                    let col = ColObject::from_attrs(col, target.clone());
                    let raw = col.raw_str().to_string();
                    let result = initiate_system_op(
                        &self.sc.policy,
                        &mut self.table,
                        &self.registry,
                        kind,
                        &target,
                        col,
                        self.tick,
                    );
                    let id = self.spec(job).id.clone();
                    match result {
                        Ok(op) => {
                            self.owner.insert(op, job);
                            self.jobs[job].outstanding.insert(op);
                            self.emit(TraceBody::PSetOp(PSetOpEvent::Specified {
                                op,
                                kind,
                                inputs: vec![target.clone()],
                                counts: vec![],
                                initiator: Initiator::System,
                                col: raw,
                                job: id.clone(),
                            }));
                            self.emit(TraceBody::Decision(DecisionEvent::Initiate {
                                op,
                                kind,
                                target,
                                job: id,
                            }));
                        }
                        Err(e) => self.emit(TraceBody::PSetOp(PSetOpEvent::Rejected {
                            job: id,
                            kind,
                            error: e.to_string(),
                        })),
                    }
                }
            }
            self.check_invariants()?;
        }
        Ok(())
    }

    fn grant(&mut self, op: OpId, delta: u32) -> Result<(), SimError> {
        let rec: PSetOpRecord = self.table.get(op).map_err(|e| self.op_err(e))?.clone();
        let kind = rec.kind();
        let attrs = rec.request.col.attrs();
        if kind.is_resource_op() && !attrs.is_valid_grant(delta) {
            return Err(self.invariant(format!("grant {delta} for {op} outside COL bounds")));
        }
        self.emit(TraceBody::Decision(DecisionEvent::Grant { op, delta }));
        let j = self.owner.get(&op).copied().unwrap_or(0);
        let mut fresh = Vec::new();
        if kind.adds_processes() {
            fresh = self
                .cluster
                .allocate(
                    delta as usize,
                    attrs.mem(),
                    self.sc.cluster.placement,
                    j as u32,
                    self.tick,
                )
                .map_err(|e| self.cluster_err(e))?;
            self.log_launches(&fresh, j);
        }
        let mut removal = Vec::new();
        if kind.removes_processes() {
            let running = self.running_members(&rec.request.inputs[0]);
            let n = delta as usize;
            if running.len() < n {
                return Err(self.invariant(format!("{op}: only {} removable", running.len())));
            }
            removal = running[running.len() - n..].to_vec();
        }
        let names = self
            .table
            .execute(op, &fresh, &removal, &mut self.registry, self.tick)
            .map_err(|e| self.op_err(e))?;
        let outputs = names
            .into_iter()
            .map(|name| {
                let members = self
                    .registry
                    .get(&name)
                    .expect("just created")
                    .members()
                    .to_vec();
                OutputSet { name, members }
            })
            .collect();
        self.emit(TraceBody::PSetOp(PSetOpEvent::Transition {
            op,
            from: OpState::Requested,
            to: OpState::ExecutedPending,
            reason: None,
            outputs,
        }));
        Ok(())
    }

    fn control_tree(&self) -> ControlTree {
        let mut tree = ControlTree::new("rm", all_slots(&self.cluster));
        for (j, job) in self.jobs.iter().enumerate() {
            if job.status != Status::Running {
                continue;
            }
            let live_slot = |p: &ProcessId| {
                self.cluster
                    .process(*p)
                    .ok()
                    .filter(|r| r.state.is_live())
                    .map(|r| r.slot)
            };
            let pm_slots: BTreeSet<SlotRef> = self
                .cluster
                .processes()
                .filter(|p| p.job == j as u32 && p.state.is_live())
                .map(|p| p.slot)
                .collect();
            let pm = tree
                .add_child(
                    tree.root(),
                    ControlKind::ProcessManager,
                    self.spec(j).id.clone(),
                    pm_slots,
                )
                .expect("root exists");
            for name in job.current.iter().chain(&job.aux) {
                let Ok(set) = self.registry.get(name) else {
                    continue;
                };
                let slots = set.members().iter().filter_map(live_slot).collect();
                tree.add_child(pm, ControlKind::Application, name.to_string(), slots)
                    .expect("pm exists");
            }
        }
        tree
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        self.cluster
            .check_invariants()
            .map_err(|m| self.invariant(m))?;
        self.control_tree()
            .validate()
            .map_err(|e| self.invariant(e.to_string()))
    }

    fn finish(self) -> RunOutput {
        let ticks = self.occupied.len() as Tick;
        let total_slots = self.cluster.total_slots() as u64;
        let occupied_slot_ticks: u64 = self.occupied.iter().sum();
        let jobs = self
            .jobs
            .iter()
            .zip(&self.sc.jobs)
            .map(|(job, spec)| JobMetrics {
                id: spec.id.clone(),
                arrival_tick: spec.arrival_tick,
                start_tick: job.start_tick,
                finish_tick: job.finish_tick,
                turnaround: job.finish_tick.map(|f| f - spec.arrival_tick),
            })
            .collect();
        let ops = self
            .table
            .records()
            .map(|r| OpMetrics {
                op: r.op_id(),
                kind: r.kind(),
                initiator: r.request.initiator,
                job: self
                    .owner
                    .get(&r.op_id())
                    .map(|&j| self.sc.jobs[j].id.clone())
                    .unwrap_or_default(),
                state: r.state,
                submit_tick: r.request.submit_tick,
                decide_tick: r.decide_tick,
                complete_tick: r.complete_tick,
                decision_latency: r.decide_tick.map(|d| d - r.request.submit_tick),
                pending_latency: r.complete_tick.zip(r.decide_tick).map(|(c, d)| c - d),
            })
            .collect();
        RunOutput {
            trace: self.trace,
            metrics: Metrics {
                ticks,
                total_slots,
                occupied_slot_ticks,
                mean_utilization: Metrics::mean_utilization_of(
                    occupied_slot_ticks,
                    ticks,
                    total_slots,
                ),
                occupied: self.occupied,
                jobs,
                ops,
            },
        }
    }
}

pub(crate) fn all_slots(cluster: &Cluster) -> BTreeSet<SlotRef> {
    cluster
        .nodes()
        .iter()
        .flat_map(|n| {
            n.slots.iter().map(|s| SlotRef {
                node: s.node_id,
                slot: s.slot_index,
            })
        })
        .collect()
}
