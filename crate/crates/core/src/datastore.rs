//! Per-PSet key-value store for publish/lookup without direct channels.
//!
//! Lookups may park until the key is published; parked lookups are resolved
//! by [`DataStore::resolve_parked`], which the event loop calls once per tick.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pset::{PSetName, PSetRegistry, ProcessId};
use crate::Tick;

/// Largest value accepted by [`DataStore::publish`].
pub const MAX_VALUE_BYTES: usize = 64 * 1024;

/// Who wrote a record. `System` orders before any process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Publisher {
    System,
    Process(ProcessId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub pset: PSetName,
    pub key: String,
    pub value: Vec<u8>,
    pub publish_tick: Tick,
    pub publisher: Publisher,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("unknown pset `{0}`")]
    UnknownPSet(PSetName),
    #[error("nothing may be published to the empty pset")]
    ReservedPSet,
    #[error("value of {0} bytes exceeds the 64 KiB cap")]
    ValueTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LookupId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    Found(Vec<u8>),
    NotFound,
    Parked(LookupId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParkedLookup {
    pub id: LookupId,
    pub pset: PSetName,
    pub key: String,
    pub requester: Publisher,
    pub park_tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub lookup: ParkedLookup,
    pub value: Vec<u8>,
    pub tick: Tick,
}

#[derive(Debug, Clone, Default)]
pub struct DataStore {
    records: BTreeMap<(PSetName, String), DataRecord>,
    parked: Vec<ParkedLookup>,
    next_lookup: u64,
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(
        &mut self,
        registry: &PSetRegistry,
        pset: &PSetName,
        key: &str,
        value: Vec<u8>,
        publisher: Publisher,
        tick: Tick,
    ) -> Result<(), DataError> {
        if !registry.contains(pset) {
            return Err(DataError::UnknownPSet(pset.clone()));
        }
        if pset.is_zero() {
            return Err(DataError::ReservedPSet);
        }
        if value.len() > MAX_VALUE_BYTES {
            return Err(DataError::ValueTooLarge(value.len()));
        }
        let slot = (pset.clone(), key.to_string());
        // last writer by (tick, publisher) wins
        if let Some(existing) = self.records.get(&slot) {
            if (existing.publish_tick, existing.publisher) > (tick, publisher) {
                return Ok(());
            }
        }
        self.records.insert(
            slot,
            DataRecord {
                pset: pset.clone(),
                key: key.to_string(),
                value,
                publish_tick: tick,
                publisher,
            },
        );
        Ok(())
    }

    pub fn get(&self, pset: &PSetName, key: &str) -> Option<&DataRecord> {
        self.records.get(&(pset.clone(), key.to_string()))
    }

    pub fn lookup(
        &mut self,
        registry: &PSetRegistry,
        pset: &PSetName,
        key: &str,
        wait: bool,
        requester: Publisher,
        tick: Tick,
    ) -> Result<Lookup, DataError> {
        if !registry.contains(pset) {
            return Err(DataError::UnknownPSet(pset.clone()));
        }
        if let Some(rec) = self.get(pset, key) {
            return Ok(Lookup::Found(rec.value.clone()));
        }
        if !wait || pset.is_zero() {
            return Ok(Lookup::NotFound);
        }
        let id = LookupId(self.next_lookup);
        self.next_lookup += 1;
        self.parked.push(ParkedLookup {
            id,
            pset: pset.clone(),
            key: key.to_string(),
            requester,
            park_tick: tick,
        });
        Ok(Lookup::Parked(id))
    }

    /// Resolve every parked lookup whose key is now present, in
    /// (park tick, requester) order.
    pub fn resolve_parked(&mut self, tick: Tick) -> Vec<Resolution> {
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
            .into_iter()
            .partition(|p| self.records.contains_key(&(p.pset.clone(), p.key.clone())));
        self.parked = waiting;
        let mut out: Vec<Resolution> = ready
            .into_iter()
            .map(|lookup| {
                let value = self.records[&(lookup.pset.clone(), lookup.key.clone())]
                    .value
                    .clone();
                Resolution {
                    lookup,
                    value,
                    tick,
                }
            })
            .collect();
        out.sort_by_key(|r| (r.lookup.park_tick, r.lookup.requester, r.lookup.id));
        out
    }

    pub fn parked(&self) -> &[ParkedLookup] {
        &self.parked
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
