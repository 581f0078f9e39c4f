//! Resource-manager decision engine.
//!
//! [`schedule_tick`] is a pure function of a [`SchedulerView`] snapshot: it
//! grants, defers or denies REQUESTED operations and may propose
//! system-initiated operations. Applying the decisions (allocation, removal
//! selection, execution) is the caller's job.

pub mod tree;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Capacity, Placement};
use crate::col::{amdahl_speedup, ColAttributes, ColObject};
use crate::pset::{OpId, PSetName, PSetRegistry};
use crate::psetop::{DenyReason, Initiator, OpParams, OpSpec, OpTable, PSetOpError, PSetOpKind};
use crate::Tick;

pub use tree::{ControlKind, ControlNode, ControlTree, NodeId, RequirementSummary, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyName {
    FifoStrict,
    GrowWhenIdle,
    FairShareDelta,
}

fn default_interval() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_max_defer() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub name: PolicyName,
    #[serde(default = "default_interval")]
    pub tick_interval: u64,
    #[serde(default = "default_true")]
    pub allow_system_shrink: bool,
    #[serde(default = "default_max_defer")]
    pub max_defer_ticks: u64,
    /// When false every dynamic operation is denied and none is initiated.
    #[serde(default = "default_true")]
    pub dynamic_ops: bool,
}

impl Policy {
    pub fn new(name: PolicyName) -> Self {
        Policy {
            name,
            tick_interval: 1,
            allow_system_shrink: true,
            max_defer_ticks: 50,
            dynamic_ops: true,
        }
    }

    fn distributes_idle(&self) -> bool {
        self.name != PolicyName::FifoStrict
    }
}

/// A REQUESTED operation as the scheduler sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestView {
    pub op: OpId,
    pub kind: PSetOpKind,
    pub initiator: Initiator,
    pub submit_tick: Tick,
    pub inputs: Vec<PSetName>,
    pub attrs: ColAttributes,
    /// Size of the first input.
    pub input_size: usize,
    /// Processes that may currently be selected for removal.
    pub removable: usize,
}

/// A running malleable job the system may resize on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct MalleableView {
    pub job: usize,
    pub target: PSetName,
    pub current: u32,
    pub grow_room: u32,
    pub shrink_room: u32,
    pub defaults: ColAttributes,
    /// Has an outstanding resize or is otherwise not eligible this tick.
    pub busy: bool,
}

#[derive(Debug, Clone)]
pub struct SchedulerView {
    pub tick: Tick,
    pub capacity: Capacity,
    pub placement: Placement,
    /// REQUESTED operations in op-id order.
    pub requests: Vec<RequestView>,
    pub malleable: Vec<MalleableView>,
    /// Jobs waiting to start.
    pub start_queue_len: usize,
    /// Slots still missing for an urgent job at the head of the start queue.
    pub urgent_deficit: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Grant {
        op: OpId,
        delta: u32,
    },
    Deny {
        op: OpId,
        reason: DenyReason,
    },
    Initiate {
        kind: PSetOpKind,
        job: usize,
        target: PSetName,
        col: ColAttributes,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("policy forbids this operation")]
    PolicyForbidden,
    #[error("unknown pset `{0}`")]
    UnknownPSet(PSetName),
    #[error("operation not initiated: {0}")]
    Rejected(PSetOpError),
}

/// Enqueue a SYSTEM-initiated operation on `target`.
pub fn initiate_system_op(
    policy: &Policy,
    table: &mut OpTable,
    registry: &PSetRegistry,
    kind: PSetOpKind,
    target: &PSetName,
    col: ColObject,
    tick: Tick,
) -> Result<OpId, SchedulerError> {
    if !registry.contains(target) {
        return Err(SchedulerError::UnknownPSet(target.clone()));
    }
    if !policy.dynamic_ops || (kind.removes_processes() && !policy.allow_system_shrink) {
        return Err(SchedulerError::PolicyForbidden);
    }
    table
        .specify(
            OpSpec {
                kind,
                inputs: vec![target.clone()],
                params: OpParams::default(),
                col,
                initiator: Initiator::System,
            },
            registry,
            tick,
        )
        .map_err(SchedulerError::Rejected)
}

/// One participant in a greedy slot distribution.
#[derive(Debug, Clone)]
struct Claim {
    base: u32,
    serial: f64,
    first: u32,
    step: u32,
    upper: u32,
    mem: u64,
}

/// Hand out slots one increment at a time to the claim with the highest
/// marginal speedup per slot; ties go to the earlier claim. A claim's first
/// increment jumps straight to its minimum grant.
fn distribute(claims: &[Claim], capacity: &Capacity, placement: Placement) -> Vec<u32> {
    let mut granted = vec![0u32; claims.len()];
    let mut cap = capacity.clone();
    let mut stuck = vec![false; claims.len()];
    loop {
        let mut best: Option<(usize, u32, f64)> = None;
        for (i, c) in claims.iter().enumerate() {
            if stuck[i] {
                continue;
            }
            let next = if granted[i] == 0 {
                c.first
            } else {
                granted[i] + c.step
            };
            if next == 0 || next > c.upper {
                continue;
            }
            let inc = next - granted[i];
            if cap.max_placeable(c.mem) < inc as usize {
                continue;
            }
            let gain = (amdahl_speedup(c.serial, c.base + next)
                - amdahl_speedup(c.serial, c.base + granted[i]))
                / f64::from(inc);
            if best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((i, inc, gain));
            }
        }
        let Some((i, inc, _)) = best else { break };
        if cap.take(inc as usize, claims[i].mem, placement).is_ok() {
            granted[i] += inc;
        } else {
            stuck[i] = true;
        }
    }
    granted
}

struct Tally<'a> {
    view: &'a SchedulerView,
    policy: &'a Policy,
    decisions: Vec<Decision>,
    blocked: BTreeSet<PSetName>,
}

impl Tally<'_> {
    fn defer(&mut self, r: &RequestView) {
        if self.view.tick.saturating_sub(r.submit_tick) >= self.policy.max_defer_ticks {
            self.decisions.push(Decision::Deny {
                op: r.op,
                reason: DenyReason::InsufficientResources,
            });
        } else {
            self.hold(r);
        }
    }

    fn hold(&mut self, r: &RequestView) {
        self.blocked
            .extend(r.inputs.iter().filter(|i| !i.is_zero()).cloned());
    }

    fn is_blocked(&self, r: &RequestView) -> bool {
        r.inputs.iter().any(|i| self.blocked.contains(i))
    }
}

/// Decide on every REQUESTED operation for this tick.
pub fn schedule_tick(policy: &Policy, view: &SchedulerView) -> Vec<Decision> {
    let mut t = Tally {
        view,
        policy,
        decisions: Vec::new(),
        blocked: BTreeSet::new(),
    };
    let mut cap = view.capacity.clone();
    let mut growers: Vec<&RequestView> = Vec::new();

    for r in &view.requests {
        if !policy.dynamic_ops {
            t.decisions.push(Decision::Deny {
                op: r.op,
                reason: DenyReason::PolicyForbidden,
            });
            continue;
        }
        if r.initiator == Initiator::System
            && r.kind.removes_processes()
            && !policy.allow_system_shrink
        {
            t.decisions.push(Decision::Deny {
                op: r.op,
                reason: DenyReason::PolicyForbidden,
            });
            continue;
        }
        if t.is_blocked(r) {
            t.defer(r);
            continue;
        }
        let want = r.attrs.num_delta;
        let mem = r.attrs.mem();
        let granted = match r.kind {
            PSetOpKind::Split
            | PSetOpKind::Union
            | PSetOpKind::Difference
            | PSetOpKind::Intersection => Some(0),
            PSetOpKind::Sub | PSetOpKind::Shrink => (r.removable >= want as usize).then_some(want),
            PSetOpKind::Replace => (r.removable >= want as usize
                && cap.take(want as usize, mem, view.placement).is_ok())
            .then_some(want),
            PSetOpKind::Add => cap
                .take(want as usize, mem, view.placement)
                .is_ok()
                .then_some(want),
            PSetOpKind::Grow if policy.distributes_idle() => {
                growers.push(r);
                t.hold(r);
                continue;
            }
            PSetOpKind::Grow => cap
                .take(want as usize, mem, view.placement)
                .is_ok()
                .then_some(want),
            PSetOpKind::Null => None,
        };
        match granted {
            Some(delta) => t.decisions.push(Decision::Grant { op: r.op, delta }),
            None => t.defer(r),
        }
    }

    if !growers.is_empty() {
        let fair = (policy.name == PolicyName::FairShareDelta)
            .then(|| (cap.free_slot_count() / growers.len()) as u32);
        let claims: Vec<Claim> = growers
            .iter()
            .map(|r| {
                let a = &r.attrs;
                let (_, hi) = a.grant_bounds();
                let mut upper = if view.start_queue_len > 0 {
                    a.num_delta
                } else {
                    hi
                };
                if let Some(f) = fair {
                    upper = upper.min(f);
                }
                let upper = a.largest_grant_at_most(upper).unwrap_or(0);
                Claim {
                    base: r.input_size.max(1) as u32,
                    serial: a.amdahl_serial_fraction.unwrap_or(1.0),
                    first: a.smallest_positive_grant().unwrap_or(0),
                    step: a.multiple_of,
                    upper,
                    mem: a.mem(),
                }
            })
            .collect();
        let mut shares = distribute(&claims, &cap, view.placement);
        // commit in op order, shrinking a share if placement order differs
        for (i, r) in growers.iter().enumerate() {
            let mut d = shares[i];
            while d > 0 && cap.plan(d as usize, claims[i].mem, view.placement).is_err() {
                d = r.attrs.largest_grant_at_most(d - 1).unwrap_or(0);
            }
            if d > 0 && r.attrs.is_valid_grant(d) {
                cap.take(d as usize, claims[i].mem, view.placement)
                    .expect("planned above");
                shares[i] = d;
                t.decisions.push(Decision::Grant { op: r.op, delta: d });
            } else {
                t.defer(r);
            }
        }
    }

    if !policy.dynamic_ops {
        return t.decisions;
    }

    // Free slots nobody asked for go to malleable jobs.
    if policy.distributes_idle() && view.start_queue_len == 0 && cap.free_slot_count() > 0 {
        let candidates: Vec<&MalleableView> = view
            .malleable
            .iter()
            .filter(|m| !m.busy && m.grow_room >= m.defaults.multiple_of)
            .collect();
        let claims: Vec<Claim> = candidates
            .iter()
            .map(|m| Claim {
                base: m.current.max(1),
                serial: m.defaults.amdahl_serial_fraction.unwrap_or(1.0),
                first: m.defaults.multiple_of,
                step: m.defaults.multiple_of,
                upper: m.grow_room / m.defaults.multiple_of * m.defaults.multiple_of,
                mem: m.defaults.mem(),
            })
            .collect();
        let shares = distribute(&claims, &cap, view.placement);
        for (m, &g) in candidates.iter().zip(&shares) {
            if g == 0 {
                continue;
            }
            let col = ColAttributes {
                num_delta: g,
                min_delta: Some(m.defaults.multiple_of),
                max_delta: Some(g),
                output_sizes: None,
                ..m.defaults.clone()
            };
            t.decisions.push(Decision::Initiate {
                kind: PSetOpKind::Grow,
                job: m.job,
                target: m.target.clone(),
                col,
            });
        }
    }

    // Make room for an urgent job by shrinking malleable ones.
    if policy.allow_system_shrink && view.urgent_deficit > 0 {
        let mut deficit = view.urgent_deficit;
        let mut victims: Vec<&MalleableView> = view
            .malleable
            .iter()
            .filter(|m| !m.busy && m.shrink_room >= m.defaults.multiple_of)
            .collect();
        victims.sort_by_key(|m| (m.defaults.priority, m.job));
        for m in victims {
            if deficit == 0 {
                break;
            }
            let step = m.defaults.multiple_of;
            let wanted = deficit.div_ceil(step) * step;
            let amount = wanted.min(m.shrink_room / step * step);
            if amount == 0 {
                continue;
            }
            let col = ColAttributes {
                num_delta: amount,
                min_delta: None,
                max_delta: None,
                output_sizes: None,
                ..m.defaults.clone()
            };
            t.decisions.push(Decision::Initiate {
                kind: PSetOpKind::Shrink,
                job: m.job,
                target: m.target.clone(),
                col,
            });
            deficit = deficit.saturating_sub(amount);
        }
    }

    t.decisions
}
