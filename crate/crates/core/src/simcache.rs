//! The edge-resident result cache.
//!
//! Vector-keyed entries are matched by an exact linear scan: a lookup hits iff
//! the nearest cached vector of the same task kind is within `beta`. Hash-keyed
//! entries are matched by byte equality. All entries share one byte budget,
//! enforced by least-recently-used eviction.
//!
//! Recency is ordered by `(last_hit_at, touch sequence)`: the virtual time of
//! the last insert or hit, with ties broken by the order in which the touches
//! happened.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{
    distance, ContentHash, Descriptor, DescriptorError, DescriptorKey, DistanceMetric, TaskKind,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("result payload must be non-empty")]
    EmptyPayload,
}

/// A cached task result. Cloning is cheap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResultPayload(Bytes);

impl ResultPayload {
    pub fn new(bytes: impl Into<Bytes>) -> Result<Self, CacheError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(CacheError::EmptyPayload);
        }
        Ok(ResultPayload(bytes))
    }

    pub fn len(&self) -> u64 {
        self.0.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn bytes(&self) -> &Bytes {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    /// Similarity threshold for vector-keyed lookups.
    pub beta: f64,
    pub metric: DistanceMetric,
    pub capacity_bytes: u64,
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CacheError::InvalidConfig(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if self.capacity_bytes == 0 {
            return Err(CacheError::InvalidConfig(
                "capacity_bytes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub descriptor: Descriptor,
    pub result: ResultPayload,
    pub inserted_at: u64,
    pub last_hit_at: u64,
    pub hit_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub bytes_resident: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Hit {
        result: ResultPayload,
        matched_distance: f64,
    },
    Miss,
}

impl Lookup {
    pub fn is_hit(&self) -> bool {
        matches!(self, Lookup::Hit { .. })
    }
}

/// Result of [`SimilarityCache::insert`]. Evicted descriptors are listed
/// oldest first.
#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Inserted { evicted: Vec<Descriptor> },
    Replaced { evicted: Vec<Descriptor> },
    RejectedTooLarge,
}

impl InsertOutcome {
    pub fn evicted(&self) -> &[Descriptor] {
        match self {
            InsertOutcome::Inserted { evicted } | InsertOutcome::Replaced { evicted } => evicted,
            InsertOutcome::RejectedTooLarge => &[],
        }
    }
}

type EntryId = u64;
type RecencyKey = (u64, u64);

#[derive(Debug)]
struct Slot {
    entry: CacheEntry,
    insert_seq: u64,
    recency: RecencyKey,
}

#[derive(Debug)]
pub struct SimilarityCache {
    config: CacheConfig,
    slots: HashMap<EntryId, Slot>,
    /// Vector-keyed entry ids per kind, in insertion order.
    vectors: HashMap<TaskKind, Vec<EntryId>>,
    hashes: HashMap<(TaskKind, ContentHash), EntryId>,
    lru: BTreeMap<RecencyKey, EntryId>,
    next_id: EntryId,
    seq: u64,
    stats: CacheStats,
}

impl SimilarityCache {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(SimilarityCache {
            config,
            slots: HashMap::new(),
            vectors: HashMap::new(),
            hashes: HashMap::new(),
            lru: BTreeMap::new(),
            next_id: 0,
            seq: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Entries from least to most recently used.
    pub fn entries_lru(&self) -> impl Iterator<Item = &CacheEntry> {
        self.lru.values().map(|id| &self.slots[id].entry)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Nearest entry of the descriptor's namespace, without touching state.
    fn nearest(&self, descriptor: &Descriptor) -> Result<Option<(EntryId, f64)>, CacheError> {
        match descriptor.key() {
            DescriptorKey::Hash(h) => Ok(self
                .hashes
                .get(&(descriptor.kind(), *h))
                .map(|&id| (id, 0.0))),
            DescriptorKey::Vector(query) => {
                let Some(ids) = self.vectors.get(&descriptor.kind()) else {
                    return Ok(None);
                };
                let mut best: Option<(EntryId, f64, &Slot)> = None;
                for &id in ids {
                    let slot = &self.slots[&id];
                    let cached = slot
                        .entry
                        .descriptor
                        .as_vector()
                        .expect("vector namespace holds vector keys");
                    let d = distance(query, cached, self.config.metric)?;
                    let better = match &best {
                        None => true,
                        Some((_, bd, bs)) => {
                            d < *bd
                                || (d == *bd
                                    && (slot.entry.last_hit_at, slot.insert_seq)
                                        > (bs.entry.last_hit_at, bs.insert_seq))
                        }
                    };
                    if better {
                        best = Some((id, d, slot));
                    }
                }
                Ok(best.map(|(id, d, _)| (id, d)))
            }
        }
    }

    /// Threshold lookup. A hit refreshes the entry's recency.
    pub fn lookup(&mut self, descriptor: &Descriptor, now: u64) -> Result<Lookup, CacheError> {
        let found = self
            .nearest(descriptor)?
            .filter(|&(_, d)| d <= self.config.beta);
        self.stats.lookups += 1;
        let Some((id, d)) = found else {
            self.stats.misses += 1;
            return Ok(Lookup::Miss);
        };
        self.stats.hits += 1;
        let seq = self.next_seq();
        let slot = self.slots.get_mut(&id).expect("indexed entry exists");
        self.lru.remove(&slot.recency);
        slot.entry.last_hit_at = slot.entry.last_hit_at.max(now);
        slot.entry.hit_count += 1;
        slot.recency = (slot.entry.last_hit_at, seq);
        self.lru.insert(slot.recency, id);
        Ok(Lookup::Hit {
            result: slot.entry.result.clone(),
            matched_distance: d,
        })
    }

    /// Entry whose key is identical to `descriptor`: equal hash, or a vector at
    /// distance exactly zero.
    fn identical(&self, descriptor: &Descriptor) -> Option<EntryId> {
        match descriptor.key() {
            DescriptorKey::Hash(h) => self.hashes.get(&(descriptor.kind(), *h)).copied(),
            DescriptorKey::Vector(query) => self.vectors.get(&descriptor.kind()).and_then(|ids| {
                ids.iter().copied().find(|id| {
                    let cached = self.slots[id].entry.descriptor.as_vector().unwrap();
                    matches!(distance(query, cached, self.config.metric), Ok(d) if d == 0.0)
                })
            }),
        }
    }

    fn remove(&mut self, id: EntryId) -> CacheEntry {
        let slot = self.slots.remove(&id).expect("entry exists");
        self.lru.remove(&slot.recency);
        let kind = slot.entry.descriptor.kind();
        match slot.entry.descriptor.key() {
            DescriptorKey::Hash(h) => {
                self.hashes.remove(&(kind, *h));
            }
            DescriptorKey::Vector(_) => {
                if let Some(ids) = self.vectors.get_mut(&kind) {
                    ids.retain(|&x| x != id);
                }
            }
        }
        self.stats.bytes_resident -= slot.entry.result.len();
        slot.entry
    }

    /// Stores `result` under `descriptor`, evicting least-recently-used entries
    /// as needed. An identical key is replaced in place of a new entry.
    pub fn insert(
        &mut self,
        descriptor: Descriptor,
        result: ResultPayload,
        now: u64,
    ) -> InsertOutcome {
        let size = result.len();
        if size > self.config.capacity_bytes {
            return InsertOutcome::RejectedTooLarge;
        }
        let previous = self.identical(&descriptor).map(|id| self.remove(id));

        let mut evicted = Vec::new();
        while self.stats.bytes_resident + size > self.config.capacity_bytes {
            let (_, &victim) = self
                .lru
                .iter()
                .next()
                .expect("resident bytes imply entries");
            evicted.push(self.remove(victim).descriptor);
            self.stats.evictions += 1;
        }

        let id = self.next_id;
        self.next_id += 1;
        let seq = self.next_seq();
        let kind = descriptor.kind();
        match descriptor.key() {
            DescriptorKey::Hash(h) => {
                self.hashes.insert((kind, *h), id);
            }
            DescriptorKey::Vector(_) => self.vectors.entry(kind).or_default().push(id),
        }
        let recency = (now, seq);
        self.lru.insert(recency, id);
        self.slots.insert(
            id,
            Slot {
                entry: CacheEntry {
                    descriptor,
                    result,
                    inserted_at: now,
                    last_hit_at: now,
                    hit_count: previous.as_ref().map_or(0, |p| p.hit_count),
                },
                insert_seq: seq,
                recency,
            },
        );
        self.stats.bytes_resident += size;
        self.stats.insertions += 1;

        if previous.is_some() {
            InsertOutcome::Replaced { evicted }
        } else {
            InsertOutcome::Inserted { evicted }
        }
    }
}

/// A [`SimilarityCache`] shared between connection handlers. Every operation
/// runs under one lock.
#[derive(Debug, Clone)]
pub struct SharedCache(Arc<Mutex<SimilarityCache>>);

impl SharedCache {
    pub fn new(cache: SimilarityCache) -> Self {
        SharedCache(Arc::new(Mutex::new(cache)))
    }

    pub fn lock(&self) -> MutexGuard<'_, SimilarityCache> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn lookup(&self, descriptor: &Descriptor, now: u64) -> Result<Lookup, CacheError> {
        self.lock().lookup(descriptor, now)
    }

    pub fn insert(&self, descriptor: Descriptor, result: ResultPayload, now: u64) -> InsertOutcome {
        self.lock().insert(descriptor, result, now)
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats()
    }
}
