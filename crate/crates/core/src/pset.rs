//! Process identities, process sets and the set-operation algebra.
//!
//! A [`PSet`] is an ordered, immutable, uniquely named set of processes. New
//! membership always means a new PSet with a new name; the [`PSetRegistry`]
//! never deletes anything during a run, so every name that was ever created
//! stays resolvable.
//!
//! The algebra functions ([`union`], [`difference`], [`intersection`],
//! [`split`]) are pure and operate on member sequences. Result ordering is
//! first-input dominant: surviving processes keep the relative order they had
//! in the earliest input that contains them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Tick;

/// Globally unique process identifier. Allocated in strictly increasing order
/// and never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u64);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a PSet operation. Monotone in submission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub u64);

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Name of the always-present empty PSet.
pub const ZERO_PSET: &str = "sys/0pset";

/// URI-style PSet name, `<namespace>/<label>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PSetName(String);

impl PSetName {
    pub fn new(name: impl Into<String>) -> Result<Self, PSetError> {
        let name = name.into();
        let mut parts = name.split('/');
        let ok = match (parts.next(), parts.next(), parts.next()) {
            (Some(ns), Some(label), None) => {
                !ns.is_empty()
                    && !label.is_empty()
                    && !name.chars().any(|c| c.is_whitespace() || c.is_control())
            }
            _ => false,
        };
        if ok {
            Ok(PSetName(name))
        } else {
            Err(PSetError::InvalidName(name))
        }
    }

    pub fn zero() -> Self {
        PSetName(ZERO_PSET.to_string())
    }

    /// Scheduler-generated output name, `rm/op<id>_out<k>`.
    pub fn rm_output(op: OpId, k: usize) -> Self {
        PSetName(format!("rm/op{}_out{}", op.0, k))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn namespace(&self) -> &str {
        self.0.split('/').next().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.0 == ZERO_PSET
    }
}

impl TryFrom<String> for PSetName {
    type Error = PSetError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        PSetName::new(value)
    }
}

impl From<PSetName> for String {
    fn from(value: PSetName) -> Self {
        value.0
    }
}

impl fmt::Display for PSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PSetError {
    #[error("invalid pset name `{0}`")]
    InvalidName(String),
    #[error("pset `{0}` already registered")]
    DuplicateName(PSetName),
    #[error("`{0}` is in the reserved sys/ namespace")]
    ReservedName(PSetName),
    #[error("process {0} appears more than once")]
    DuplicateMember(ProcessId),
    #[error("unknown pset `{0}`")]
    UnknownPSet(PSetName),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlgebraError {
    #[error("set operation needs at least one input")]
    EmptyInputList,
    #[error("split needs at least one count")]
    EmptyCounts,
    #[error("split counts must be positive")]
    ZeroCount,
    #[error("split counts sum to {actual}, input has {expected} members")]
    CountMismatch { expected: usize, actual: usize },
}

/// An immutable, named, ordered set of processes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PSet {
    name: PSetName,
    members: Vec<ProcessId>,
    origin: Option<OpId>,
}

impl PSet {
    pub fn name(&self) -> &PSetName {
        &self.name
    }

    pub fn members(&self) -> &[ProcessId] {
        &self.members
    }

    /// Operation that created this set; `None` for bootstrap sets.
    pub fn origin(&self) -> Option<OpId> {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, pid: ProcessId) -> bool {
        self.members.contains(&pid)
    }
}

impl AsRef<[ProcessId]> for PSet {
    fn as_ref(&self) -> &[ProcessId] {
        &self.members
    }
}

/// Global name → PSet map. PSets are never removed.
#[derive(Debug, Clone)]
pub struct PSetRegistry {
    sets: BTreeMap<PSetName, PSet>,
    log: Vec<(Tick, PSetName)>,
}

impl Default for PSetRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl PSetRegistry {
    pub fn new() -> Self {
        let zero = PSet {
            name: PSetName::zero(),
            members: Vec::new(),
            origin: None,
        };
        let mut sets = BTreeMap::new();
        sets.insert(zero.name.clone(), zero);
        PSetRegistry {
            sets,
            log: vec![(0, PSetName::zero())],
        }
    }

    pub fn create(
        &mut self,
        name: PSetName,
        members: Vec<ProcessId>,
        origin: Option<OpId>,
        tick: Tick,
    ) -> Result<&PSet, PSetError> {
        if self.sets.contains_key(&name) {
            return Err(PSetError::DuplicateName(name));
        }
        if name.namespace() == "sys" {
            return Err(PSetError::ReservedName(name));
        }
        let mut seen = HashSet::with_capacity(members.len());
        for &pid in &members {
            if !seen.insert(pid) {
                return Err(PSetError::DuplicateMember(pid));
            }
        }
        self.log.push((tick, name.clone()));
        let set = PSet {
            name: name.clone(),
            members,
            origin,
        };
        Ok(self.sets.entry(name).or_insert(set))
    }

    pub fn get(&self, name: &PSetName) -> Result<&PSet, PSetError> {
        self.sets
            .get(name)
            .ok_or_else(|| PSetError::UnknownPSet(name.clone()))
    }

    pub fn contains(&self, name: &PSetName) -> bool {
        self.sets.contains_key(name)
    }

    pub fn zero(&self) -> &PSet {
        &self.sets[&PSetName::zero()]
    }

    /// Creation log in creation order.
    pub fn log(&self) -> &[(Tick, PSetName)] {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PSet> {
        self.sets.values()
    }
}

/// Members of `inputs[0]` in order, then unseen members of each later input
/// in that input's order.
pub fn union<S: AsRef<[ProcessId]>>(inputs: &[S]) -> Result<Vec<ProcessId>, AlgebraError> {
    if inputs.is_empty() {
        return Err(AlgebraError::EmptyInputList);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for input in inputs {
        for &pid in input.as_ref() {
            if seen.insert(pid) {
                out.push(pid);
            }
        }
    }
    Ok(out)
}

/// `inputs[0]` minus the union of the remaining inputs, order of `inputs[0]`.
pub fn difference<S: AsRef<[ProcessId]>>(inputs: &[S]) -> Result<Vec<ProcessId>, AlgebraError> {
    let (first, rest) = inputs.split_first().ok_or(AlgebraError::EmptyInputList)?;
    let removed: HashSet<ProcessId> = rest
        .iter()
        .flat_map(|s| s.as_ref().iter().copied())
        .collect();
    Ok(first
        .as_ref()
        .iter()
        .copied()
        .filter(|pid| !removed.contains(pid))
        .collect())
}

/// Processes present in every input, order of `inputs[0]`.
pub fn intersection<S: AsRef<[ProcessId]>>(inputs: &[S]) -> Result<Vec<ProcessId>, AlgebraError> {
    let (first, rest) = inputs.split_first().ok_or(AlgebraError::EmptyInputList)?;
    let others: Vec<HashSet<ProcessId>> = rest
        .iter()
        .map(|s| s.as_ref().iter().copied().collect())
        .collect();
    Ok(first
        .as_ref()
        .iter()
        .copied()
        .filter(|pid| others.iter().all(|o| o.contains(pid)))
        .collect())
}

/// Contiguous partition of `input` into chunks of the given sizes.
pub fn split(input: &[ProcessId], counts: &[usize]) -> Result<Vec<Vec<ProcessId>>, AlgebraError> {
    if counts.is_empty() {
        return Err(AlgebraError::EmptyCounts);
    }
    if counts.contains(&0) {
        return Err(AlgebraError::ZeroCount);
    }
    let total: usize = counts.iter().sum();
    if total != input.len() {
        return Err(AlgebraError::CountMismatch {
            expected: input.len(),
            actual: total,
        });
    }
    let mut rest = input;
    Ok(counts
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}
