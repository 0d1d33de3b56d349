//! Reference models shared by the integration tests. Everything here is a
//! deliberately naive re-statement of the rules, written without looking at
//! the indexes and event queues of the real implementation.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use coic_core::descriptor::{distance, Descriptor, DescriptorKey, DistanceMetric};
use coic_core::netmodel::{ms_to_us, ComputeSpec, Links, SizeSpec};
use coic_core::workload::Trace;

/// Independent L2 distance over the stored f32 components.
pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn oracle_distance(a: &Descriptor, b: &Descriptor, metric: DistanceMetric) -> Option<f64> {
    if a.kind() != b.kind() {
        return None;
    }
    match (a.key(), b.key()) {
        (DescriptorKey::Hash(x), DescriptorKey::Hash(y)) => (x == y).then_some(0.0),
        (DescriptorKey::Vector(x), DescriptorKey::Vector(y)) => match metric {
            DistanceMetric::EuclideanL2 => Some(l2(x.values(), y.values())),
            DistanceMetric::Cosine => distance(x, y, metric).ok(),
        },
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct OracleEntry {
    pub descriptor: Descriptor,
    pub tag: u64,
    pub size: u64,
    pub last_hit_at: u64,
    pub order: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleLookup {
    Hit { tag: u64, distance: f64 },
    Miss,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleInsert {
    Inserted { evicted: Vec<u64> },
    Replaced { evicted: Vec<u64> },
    Rejected,
}

/// Brute-force similarity cache: a plain list scanned in full on every
/// lookup, plus a recency list whose front is the eviction victim. Entries are
/// identified by the caller-supplied `tag` of their result.
#[derive(Debug, Clone)]
pub struct OracleCache {
    pub beta: f64,
    pub metric: DistanceMetric,
    pub capacity: u64,
    pub entries: Vec<OracleEntry>,
    /// Tags, least recently used first.
    pub recency: Vec<u64>,
    counter: u64,
}

impl OracleCache {
    pub fn new(beta: f64, metric: DistanceMetric, capacity: u64) -> Self {
        OracleCache {
            beta,
            metric,
            capacity,
            entries: Vec::new(),
            recency: Vec::new(),
            counter: 0,
        }
    }

    pub fn resident(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    fn touch(&mut self, tag: u64) {
        self.recency.retain(|&t| t != tag);
        self.recency.push(tag);
    }

    pub fn lookup(&mut self, query: &Descriptor, now: u64) -> OracleLookup {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let Some(d) = oracle_distance(query, &e.descriptor, self.metric) else {
                continue;
            };
            best = match best {
                None => Some((i, d)),
                Some((j, bd)) => {
                    let b = &self.entries[j];
                    let wins =
                        d < bd || (d == bd && (e.last_hit_at, e.order) > (b.last_hit_at, b.order));
                    if wins {
                        Some((i, d))
                    } else {
                        Some((j, bd))
                    }
                }
            };
        }
        match best {
            Some((i, d)) if d <= self.beta => {
                let e = &mut self.entries[i];
                e.last_hit_at = e.last_hit_at.max(now);
                let tag = e.tag;
                self.touch(tag);
                OracleLookup::Hit { tag, distance: d }
            }
            _ => OracleLookup::Miss,
        }
    }

    pub fn insert(
        &mut self,
        descriptor: Descriptor,
        tag: u64,
        size: u64,
        now: u64,
    ) -> OracleInsert {
        if size > self.capacity {
            return OracleInsert::Rejected;
        }
        let same = self
            .entries
            .iter()
            .position(|e| oracle_distance(&descriptor, &e.descriptor, self.metric) == Some(0.0));
        let replaced = same.map(|i| {
            let old = self.entries.remove(i);
            self.recency.retain(|&t| t != old.tag);
        });
        let mut evicted = Vec::new();
        while self.resident() + size > self.capacity {
            let victim = self.recency.remove(0);
            self.entries.retain(|e| e.tag != victim);
            evicted.push(victim);
        }
        self.counter += 1;
        self.entries.push(OracleEntry {
            descriptor,
            tag,
            size,
            last_hit_at: now,
            order: self.counter,
        });
        self.recency.push(tag);
        if replaced.is_some() {
            OracleInsert::Replaced { evicted }
        } else {
            OracleInsert::Inserted { evicted }
        }
    }
}

/// Result payload whose first eight bytes carry `tag`, padded to `size`.
pub fn tagged_payload(tag: u64, size: u64) -> coic_core::ResultPayload {
    let mut bytes = vec![0xA5u8; size.max(8) as usize];
    bytes[..8].copy_from_slice(&tag.to_be_bytes());
    bytes.truncate(size as usize);
    coic_core::ResultPayload::new(bytes).unwrap()
}

pub fn payload_tag(payload: &coic_core::ResultPayload) -> u64 {
    u64::from_be_bytes(payload.as_bytes()[..8].try_into().unwrap())
}

/// Hit/miss outcome of one request according to [`replay_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expected {
    pub hit: bool,
    /// Trace index of the request whose result was matched.
    pub source: Option<usize>,
    pub latency_ms: f64,
}

#[derive(PartialEq)]
struct Ev {
    key: (u64, u8, u64, u64, usize),
}

impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.cmp(&self.key)
    }
}

fn tx(link: &coic_core::LinkSpec, bytes: u64) -> f64 {
    link.propagation_ms + bytes as f64 * 8.0 / link.bandwidth_bps * 1000.0
}

/// Sequential replay of a trace against the oracle cache using the analytic
/// timings: each request reaches the edge at `issued + extract + t_ME(desc)`,
/// and a miss is inserted when the cloud's answer returns to the edge. At one
/// microsecond, arrivals are looked up before any result is inserted, and
/// inserts go in order of (cloud arrival, edge arrival, trace position).
pub fn replay_schedule(
    trace: &Trace,
    links: &Links,
    compute: &ComputeSpec,
    sizes: &SizeSpec,
    cache: Option<(f64, DistanceMetric, u64)>,
) -> Vec<Expected> {
    let n = trace.len();
    let mut out = vec![None; n];
    let mut oracle = cache.map(|(b, m, c)| OracleCache::new(b, m, c));
    let mut heap = BinaryHeap::new();
    let mut arrive_ms = vec![0.0; n];
    for (i, e) in trace.iter().enumerate() {
        let k = e.request.kind;
        let a =
            compute.get(k).client_extract_ms + tx(&links.me, sizes.get(k).request_descriptor_bytes);
        arrive_ms[i] = a;
        let t = e.request.issued_at + ms_to_us(a);
        heap.push(Ev {
            key: (t, 0, 0, 0, i),
        });
    }
    while let Some(Ev {
        key: (t, what, _, _, i),
    }) = heap.pop()
    {
        let e = &trace.entries[i];
        let k = e.request.kind;
        let c = compute.get(k);
        let s = sizes.get(k);
        let lookup_ms = if oracle.is_some() {
            c.edge_lookup_ms
        } else {
            0.0
        };
        if what == 0 {
            let found = match &mut oracle {
                Some(o) => o.lookup(&e.request.descriptor, t),
                None => OracleLookup::Miss,
            };
            if let OracleLookup::Hit { tag, .. } = found {
                let l = arrive_ms[i] + lookup_ms + tx(&links.me, s.result_bytes);
                out[i] = Some(Expected {
                    hit: true,
                    source: Some(tag as usize),
                    latency_ms: l,
                });
            } else {
                let at_cloud = arrive_ms[i] + lookup_ms + tx(&links.ec, s.request_descriptor_bytes);
                let back = at_cloud + c.cloud_compute_ms + tx(&links.ec, s.result_bytes);
                let l = back + tx(&links.me, s.result_bytes);
                out[i] = Some(Expected {
                    hit: false,
                    source: None,
                    latency_ms: l,
                });
                let base = e.request.issued_at;
                heap.push(Ev {
                    key: (base + ms_to_us(back), 1, base + ms_to_us(at_cloud), t, i),
                });
            }
        } else if let Some(o) = &mut oracle {
            o.insert(e.request.descriptor.clone(), i as u64, s.result_bytes, t);
        }
    }
    out.into_iter().map(Option::unwrap).collect()
}
