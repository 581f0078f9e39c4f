//! Simulated machine and process manager.
//!
//! Each process is bound to exactly one slot from launch until it has fully
//! terminated. Processes never migrate. Launch and termination take a fixed
//! number of ticks, optionally with seeded jitter on launch.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pset::ProcessId;
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub node: u32,
    pub slot: u32,
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.node, self.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Fill nodes in id order.
    #[default]
    Pack,
    /// Round-robin across nodes.
    Spread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcState {
    Launching,
    Running,
    Terminating,
    Terminated,
}

impl ProcState {
    pub fn is_live(self) -> bool {
        self != ProcState::Terminated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub node_id: u32,
    pub slot_index: u32,
    pub occupant: Option<ProcessId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub node_id: u32,
    pub slots: Vec<Slot>,
    pub mem_mib: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessRecord {
    pub pid: ProcessId,
    pub state: ProcState,
    pub slot: SlotRef,
    pub job: u32,
    pub mem_mib: u64,
    pub launch_tick: Tick,
    pub term_tick: Option<Tick>,
    /// Tick at which the current LAUNCHING/TERMINATING phase ends.
    due: Option<Tick>,
    /// Terminate as soon as launching finishes.
    doomed: bool,
}

/// One lifecycle transition, as reported by [`Cluster::advance`] and friends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessEvent {
    pub pid: ProcessId,
    pub state: ProcState,
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("requested {requested} slots, {free} free")]
    InsufficientSlots { requested: usize, free: usize },
    #[error("not enough memory to place {requested} processes of {mem} MiB")]
    InsufficientMemory { requested: usize, mem: u64 },
    #[error("process {pid} is {state:?}")]
    BadState { pid: ProcessId, state: ProcState },
    #[error("unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error("allocation count must be at least 1")]
    ZeroCount,
}

/// Free resources per node; used both for real allocation and for the
/// scheduler's what-if planning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capacity {
    free_slots: Vec<Vec<u32>>,
    free_mem: Vec<u64>,
}

impl Capacity {
    pub fn free_slot_count(&self) -> usize {
        self.free_slots.iter().map(Vec::len).sum()
    }

    /// Slots `count` processes would land on, without committing.
    pub fn plan(
        &self,
        count: usize,
        mem: u64,
        placement: Placement,
    ) -> Result<Vec<SlotRef>, ClusterError> {
        if count == 0 {
            return Err(ClusterError::ZeroCount);
        }
        let free = self.free_slot_count();
        if free < count {
            return Err(ClusterError::InsufficientSlots {
                requested: count,
                free,
            });
        }
        let mut cursor = vec![0usize; self.free_slots.len()];
        let mut mem_left = self.free_mem.clone();
        let mut out = Vec::with_capacity(count);
        let mut take = |node: usize, out: &mut Vec<SlotRef>| -> bool {
            let fits = cursor[node] < self.free_slots[node].len() && mem_left[node] >= mem;
            if fits {
                out.push(SlotRef {
                    node: node as u32,
                    slot: self.free_slots[node][cursor[node]],
                });
                cursor[node] += 1;
                mem_left[node] -= mem;
            }
            fits
        };
        match placement {
            Placement::Pack => {
                for node in 0..self.free_slots.len() {
                    while out.len() < count && take(node, &mut out) {}
                }
            }
            Placement::Spread => loop {
                let before = out.len();
                for node in 0..self.free_slots.len() {
                    if out.len() < count {
                        take(node, &mut out);
                    }
                }
                if out.len() == count || out.len() == before {
                    break;
                }
            },
        }
        if out.len() < count {
            return Err(ClusterError::InsufficientMemory {
                requested: count,
                mem,
            });
        }
        Ok(out)
    }

    /// Plan and commit against this snapshot.
    pub fn take(
        &mut self,
        count: usize,
        mem: u64,
        placement: Placement,
    ) -> Result<Vec<SlotRef>, ClusterError> {
        let slots = self.plan(count, mem, placement)?;
        for s in &slots {
            let node = s.node as usize;
            self.free_slots[node].retain(|&i| i != s.slot);
            self.free_mem[node] -= mem;
        }
        Ok(slots)
    }

    /// How many processes of `mem` MiB could still be placed.
    pub fn max_placeable(&self, mem: u64) -> usize {
        self.free_slots
            .iter()
            .zip(&self.free_mem)
            .map(|(slots, &m)| match m.checked_div(mem) {
                Some(fit) => slots.len().min(fit as usize),
                None => slots.len(),
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    nodes: Vec<Node>,
    procs: BTreeMap<ProcessId, ProcessRecord>,
    next_pid: u64,
    launch_latency: Tick,
    term_latency: Tick,
    jitter: Option<(Tick, ChaCha8Rng)>,
}

impl Cluster {
    pub fn new(
        nodes: u32,
        slots_per_node: u32,
        mem_per_node: u64,
        launch_latency: Tick,
        term_latency: Tick,
    ) -> Self {
        let nodes = (0..nodes)
            .map(|node_id| Node {
                node_id,
                slots: (0..slots_per_node)
                    .map(|slot_index| Slot {
                        node_id,
                        slot_index,
                        occupant: None,
                    })
                    .collect(),
                mem_mib: mem_per_node,
            })
            .collect();
        Cluster {
            nodes,
            procs: BTreeMap::new(),
            next_pid: 0,
            launch_latency,
            term_latency,
            jitter: None,
        }
    }

    /// Add a uniform `0..=max` extra launch delay drawn from a seeded stream.
    pub fn with_launch_jitter(mut self, max: Tick, seed: u64) -> Self {
        if max > 0 {
            self.jitter = Some((max, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn total_slots(&self) -> usize {
        self.nodes.iter().map(|n| n.slots.len()).sum()
    }

    pub fn occupied_slots(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.slots)
            .filter(|s| s.occupant.is_some())
            .count()
    }

    pub fn free_slots(&self) -> usize {
        self.total_slots() - self.occupied_slots()
    }

    /// Occupied fraction of all slots right now.
    pub fn utilization(&self) -> f64 {
        let total = self.total_slots();
        if total == 0 {
            0.0
        } else {
            self.occupied_slots() as f64 / total as f64
        }
    }

    pub fn process(&self, pid: ProcessId) -> Result<&ProcessRecord, ClusterError> {
        self.procs
            .get(&pid)
            .ok_or(ClusterError::UnknownProcess(pid))
    }

    pub fn processes(&self) -> impl Iterator<Item = &ProcessRecord> {
        self.procs.values()
    }

    pub fn state(&self, pid: ProcessId) -> Option<ProcState> {
        self.procs.get(&pid).map(|p| p.state)
    }

    pub fn live_count(&self) -> usize {
        self.procs.values().filter(|p| p.state.is_live()).count()
    }

    fn node_mem_used(&self, node: u32) -> u64 {
        self.nodes[node as usize]
            .slots
            .iter()
            .filter_map(|s| s.occupant)
            .map(|pid| self.procs[&pid].mem_mib)
            .sum()
    }

    pub fn capacity(&self) -> Capacity {
        Capacity {
            free_slots: self
                .nodes
                .iter()
                .map(|n| {
                    n.slots
                        .iter()
                        .filter(|s| s.occupant.is_none())
                        .map(|s| s.slot_index)
                        .collect()
                })
                .collect(),
            free_mem: self
                .nodes
                .iter()
                .map(|n| n.mem_mib.saturating_sub(self.node_mem_used(n.node_id)))
                .collect(),
        }
    }

    /// Launch `count` fresh processes on free slots. All or nothing.
    pub fn allocate(
        &mut self,
        count: usize,
        mem_per_process: u64,
        placement: Placement,
        job: u32,
        tick: Tick,
    ) -> Result<Vec<ProcessId>, ClusterError> {
        let slots = self.capacity().plan(count, mem_per_process, placement)?;
        let mut pids = Vec::with_capacity(count);
        for slot in slots {
            let pid = ProcessId(self.next_pid);
            self.next_pid += 1;
            let extra = match &mut self.jitter {
                Some((max, rng)) => rng.random_range(0..=*max),
                None => 0,
            };
            self.nodes[slot.node as usize].slots[slot.slot as usize].occupant = Some(pid);
            self.procs.insert(
                pid,
                ProcessRecord {
                    pid,
                    state: ProcState::Launching,
                    slot,
                    job,
                    mem_mib: mem_per_process,
                    launch_tick: tick,
                    term_tick: None,
                    due: Some(tick + self.launch_latency + extra),
                    doomed: false,
                },
            );
            pids.push(pid);
        }
        Ok(pids)
    }

    fn begin_termination(&mut self, pid: ProcessId, tick: Tick) {
        let latency = self.term_latency;
        let rec = self.procs.get_mut(&pid).expect("caller checked");
        rec.state = ProcState::Terminating;
        rec.due = Some(tick + latency);
    }

    /// Move RUNNING processes to TERMINATING. Fails without side effects if
    /// any pid is not RUNNING.
    pub fn terminate_processes(
        &mut self,
        pids: &[ProcessId],
        tick: Tick,
    ) -> Result<Vec<ProcessEvent>, ClusterError> {
        for &pid in pids {
            let state = self.process(pid)?.state;
            if state != ProcState::Running {
                return Err(ClusterError::BadState { pid, state });
            }
        }
        Ok(pids
            .iter()
            .map(|&pid| {
                self.begin_termination(pid, tick);
                ProcessEvent {
                    pid,
                    state: ProcState::Terminating,
                    tick,
                }
            })
            .collect())
    }

    /// Terminate RUNNING processes now and LAUNCHING ones as soon as they
    /// are up. Already-terminating processes are left alone.
    pub fn request_termination(&mut self, pids: &[ProcessId], tick: Tick) -> Vec<ProcessEvent> {
        let mut events = Vec::new();
        for &pid in pids {
            match self.procs.get_mut(&pid).map(|p| p.state) {
                Some(ProcState::Running) => {
                    self.begin_termination(pid, tick);
                    events.push(ProcessEvent {
                        pid,
                        state: ProcState::Terminating,
                        tick,
                    });
                }
                Some(ProcState::Launching) => {
                    self.procs.get_mut(&pid).expect("present").doomed = true;
                }
                _ => {}
            }
        }
        events
    }

    /// Apply every lifecycle transition due at or before `tick`.
    pub fn advance(&mut self, tick: Tick) -> Vec<ProcessEvent> {
        let due: Vec<ProcessId> = self
            .procs
            .values()
            .filter(|p| p.due.is_some_and(|d| d <= tick))
            .map(|p| p.pid)
            .collect();
        let mut events = Vec::new();
        for pid in due {
            let rec = self.procs.get_mut(&pid).expect("present");
            match rec.state {
                ProcState::Launching => {
                    rec.state = ProcState::Running;
                    rec.due = None;
                    events.push(ProcessEvent {
                        pid,
                        state: ProcState::Running,
                        tick,
                    });
                    if rec.doomed {
                        self.begin_termination(pid, tick);
                        events.push(ProcessEvent {
                            pid,
                            state: ProcState::Terminating,
                            tick,
                        });
                        if self.term_latency == 0 {
                            events.extend(self.finish_termination(pid, tick));
                        }
                    }
                }
                ProcState::Terminating => events.extend(self.finish_termination(pid, tick)),
                _ => {}
            }
        }
        events
    }

    fn finish_termination(&mut self, pid: ProcessId, tick: Tick) -> Option<ProcessEvent> {
        let rec = self.procs.get_mut(&pid)?;
        rec.state = ProcState::Terminated;
        rec.due = None;
        rec.term_tick = Some(tick);
        let slot = rec.slot;
        self.nodes[slot.node as usize].slots[slot.slot as usize].occupant = None;
        Some(ProcessEvent {
            pid,
            state: ProcState::Terminated,
            tick,
        })
    }

    /// Conservation, single occupancy, fixed binding and memory feasibility.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut occupied = 0;
        for node in &self.nodes {
            for slot in &node.slots {
                if let Some(pid) = slot.occupant {
                    occupied += 1;
                    let rec = self
                        .procs
                        .get(&pid)
                        .ok_or_else(|| format!("slot holds unknown process {pid}"))?;
                    if !rec.state.is_live() {
                        return Err(format!("terminated process {pid} still holds a slot"));
                    }
                    let here = SlotRef {
                        node: node.node_id,
                        slot: slot.slot_index,
                    };
                    if rec.slot != here {
                        return Err(format!(
                            "process {pid} bound to {} but found on {here}",
                            rec.slot
                        ));
                    }
                }
            }
            let used = self.node_mem_used(node.node_id);
            if used > node.mem_mib {
                return Err(format!(
                    "node {} memory {used} MiB exceeds {} MiB",
                    node.node_id, node.mem_mib
                ));
            }
        }
        let live = self.live_count();
        if live != occupied {
            return Err(format!(
                "{live} live processes but {occupied} occupied slots"
            ));
        }
        Ok(())
    }
}
