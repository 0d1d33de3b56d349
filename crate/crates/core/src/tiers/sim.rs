//! Deterministic discrete-event execution of the request lifecycle.
//!
//! Every request carries its exact elapsed time in milliseconds; each event is
//! scheduled at `issued_at + round_half_up_us(elapsed)`. Rounding happens once
//! per event against the exact running sum, so measured latencies stay within
//! half a microsecond of the closed forms in [`crate::netmodel`].
//!
//! Events at the same instant run in enqueue order.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use thiserror::Error;

use super::{CloudBackend, ServedFrom, TaskRequest, TaskResponse};
use crate::descriptor::TaskKind;
use crate::netmodel::{ms_to_us, ComputeSpec, Links, SizeSpec, VirtualClock};
use crate::simcache::{
    CacheConfig, CacheError, CacheStats, Lookup, ResultPayload, SimilarityCache,
};
use crate::workload::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("duplicate request id {0}")]
    DuplicateRequestId(u64),
    #[error("request {request_id}: kind {kind} does not match its descriptor")]
    KindMismatch { request_id: u64, kind: TaskKind },
    #[error("request {request_id} issued at {issued_at}us, before the clock ({now}us)")]
    IssuedInPast {
        request_id: u64,
        issued_at: u64,
        now: u64,
    },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{} request(s) never received a response, first {}", .0.len(), .0[0])]
    Unanswered(Vec<u64>),
}

/// Everything the lifecycle needs besides the backend. `cache: None` is the
/// cache-less baseline: the edge forwards every request and charges no lookup.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub links: Links,
    pub compute: ComputeSpec,
    pub sizes: SizeSpec,
    pub cache: Option<CacheConfig>,
}

/// One completed request.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub request_id: u64,
    pub user_id: u32,
    pub kind: TaskKind,
    pub issued_at: u64,
    pub completed_at: u64,
    pub latency_us: u64,
    pub served_from: ServedFrom,
    pub matched_distance: Option<f64>,
    pub result: ResultPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Sorted by request id.
    pub records: Vec<Record>,
    pub cache_stats: Option<CacheStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeOutcome {
    HitPath,
    MissPath,
}

#[derive(Debug, Clone)]
enum Event {
    EdgeArrival(u64),
    CloudArrival(u64),
    EdgeReturn(u64, ResultPayload),
    ClientDelivery(u64, ResultPayload, ServedFrom),
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Priority queue of events ordered by `(time, enqueue sequence)`.
#[derive(Debug, Default)]
struct EventLoop {
    heap: BinaryHeap<Scheduled>,
    next_seq: u64,
    clock: VirtualClock,
}

impl EventLoop {
    fn schedule(&mut self, time: u64, event: Event) {
        debug_assert!(time >= self.clock.now_us());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, event });
    }

    fn pop(&mut self) -> Option<Event> {
        let next = self.heap.pop()?;
        self.clock.advance_to(next.time);
        Some(next.event)
    }
}

#[derive(Debug)]
struct InFlight {
    request: TaskRequest,
    elapsed_ms: f64,
    matched_distance: Option<f64>,
}

pub struct Simulator<'a> {
    config: SimConfig,
    backend: &'a CloudBackend,
    cache: Option<SimilarityCache>,
    events: EventLoop,
    in_flight: HashMap<u64, InFlight>,
    issued: HashSet<u64>,
    responses: Vec<(InFlight, TaskResponse)>,
}

impl<'a> Simulator<'a> {
    pub fn new(config: SimConfig, backend: &'a CloudBackend) -> Result<Self, SimError> {
        let cache = config.cache.map(SimilarityCache::new).transpose()?;
        Ok(Simulator {
            config,
            backend,
            cache,
            events: EventLoop::default(),
            in_flight: HashMap::new(),
            issued: HashSet::new(),
            responses: Vec::new(),
        })
    }

    pub fn now_us(&self) -> u64 {
        self.events.clock.now_us()
    }

    pub fn cache(&self) -> Option<&SimilarityCache> {
        self.cache.as_ref()
    }

    fn schedule(&mut self, id: u64, event: Event) {
        let f = &self.in_flight[&id];
        let at = f.request.issued_at + ms_to_us(f.elapsed_ms);
        self.events.schedule(at, event);
    }

    fn charge(&mut self, id: u64, ms: f64) {
        self.in_flight
            .get_mut(&id)
            .expect("request in flight")
            .elapsed_ms += ms;
    }

    /// Client side: charges extraction and the descriptor upload, then
    /// schedules the edge arrival. Returns the arrival time.
    pub fn client_issue(&mut self, request: TaskRequest) -> Result<u64, SimError> {
        let id = request.request_id;
        if request.descriptor.kind() != request.kind {
            return Err(SimError::KindMismatch {
                request_id: id,
                kind: request.kind,
            });
        }
        if request.issued_at < self.now_us() {
            return Err(SimError::IssuedInPast {
                request_id: id,
                issued_at: request.issued_at,
                now: self.now_us(),
            });
        }
        if !self.issued.insert(id) {
            return Err(SimError::DuplicateRequestId(id));
        }
        let kind = request.kind;
        let elapsed_ms = self.config.compute.get(kind).client_extract_ms
            + self
                .config
                .links
                .me
                .transfer_time_ms(self.config.sizes.get(kind).request_descriptor_bytes);
        self.in_flight.insert(
            id,
            InFlight {
                request,
                elapsed_ms,
                matched_distance: None,
            },
        );
        self.schedule(id, Event::EdgeArrival(id));
        let f = &self.in_flight[&id];
        Ok(f.request.issued_at + ms_to_us(f.elapsed_ms))
    }

    fn edge_handle(&mut self, id: u64) -> Result<EdgeOutcome, SimError> {
        let now = self.now_us();
        let kind = self.in_flight[&id].request.kind;
        let compute = *self.config.compute.get(kind);
        let sizes = *self.config.sizes.get(kind);
        let lookup = match self.cache.as_mut() {
            Some(cache) => {
                let found = cache.lookup(&self.in_flight[&id].request.descriptor, now)?;
                self.charge(id, compute.edge_lookup_ms);
                found
            }
            None => Lookup::Miss,
        };
        match lookup {
            Lookup::Hit {
                result,
                matched_distance,
            } => {
                let t = self.config.links.me.transfer_time_ms(sizes.result_bytes);
                let f = self.in_flight.get_mut(&id).unwrap();
                f.matched_distance = Some(matched_distance);
                f.elapsed_ms += t;
                self.schedule(id, Event::ClientDelivery(id, result, ServedFrom::Edge));
                Ok(EdgeOutcome::HitPath)
            }
            Lookup::Miss => {
                let t = self
                    .config
                    .links
                    .ec
                    .transfer_time_ms(sizes.request_descriptor_bytes);
                self.charge(id, t);
                self.schedule(id, Event::CloudArrival(id));
                Ok(EdgeOutcome::MissPath)
            }
        }
    }

    fn cloud_handle(&mut self, id: u64) {
        let kind = self.in_flight[&id].request.kind;
        let result = self
            .backend
            .result_for(&self.in_flight[&id].request.descriptor);
        let compute = self.config.compute.get(kind).cloud_compute_ms;
        let transfer = self
            .config
            .links
            .ec
            .transfer_time_ms(self.config.sizes.get(kind).result_bytes);
        self.charge(id, compute);
        self.charge(id, transfer);
        self.schedule(id, Event::EdgeReturn(id, result));
    }

    fn edge_return(&mut self, id: u64, result: ResultPayload) {
        let now = self.now_us();
        if let Some(cache) = self.cache.as_mut() {
            let descriptor = self.in_flight[&id].request.descriptor.clone();
            cache.insert(descriptor, result.clone(), now);
        }
        let kind = self.in_flight[&id].request.kind;
        let t = self
            .config
            .links
            .me
            .transfer_time_ms(self.config.sizes.get(kind).result_bytes);
        self.charge(id, t);
        self.schedule(id, Event::ClientDelivery(id, result, ServedFrom::Cloud));
    }

    fn deliver(&mut self, id: u64, result: ResultPayload, served_from: ServedFrom) {
        let f = self.in_flight.remove(&id).expect("request in flight");
        let response = TaskResponse {
            request_id: id,
            result,
            served_from,
            completed_at: self.now_us(),
        };
        self.responses.push((f, response));
    }

    /// Processes the next event. Returns `false` once the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(event) = self.events.pop() else {
            return Ok(false);
        };
        match event {
            Event::EdgeArrival(id) => {
                self.edge_handle(id)?;
            }
            Event::CloudArrival(id) => self.cloud_handle(id),
            Event::EdgeReturn(id, result) => self.edge_return(id, result),
            Event::ClientDelivery(id, result, from) => self.deliver(id, result, from),
        }
        Ok(true)
    }

    /// Runs until no events remain, then returns one record per request.
    pub fn finish(mut self) -> Result<SimOutput, SimError> {
        while self.step()? {}
        if !self.in_flight.is_empty() {
            let mut ids: Vec<u64> = self.in_flight.keys().copied().collect();
            ids.sort_unstable();
            return Err(SimError::Unanswered(ids));
        }
        let mut records: Vec<Record> = self
            .responses
            .into_iter()
            .map(|(f, r)| Record {
                request_id: r.request_id,
                user_id: f.request.user_id,
                kind: f.request.kind,
                issued_at: f.request.issued_at,
                completed_at: r.completed_at,
                latency_us: r.completed_at - f.request.issued_at,
                served_from: r.served_from,
                matched_distance: f.matched_distance,
                result: r.result,
            })
            .collect();
        records.sort_by_key(|r| r.request_id);
        Ok(SimOutput {
            records,
            cache_stats: self.cache.as_ref().map(SimilarityCache::stats),
        })
    }
}

/// Replays `trace` to completion. All requests are issued up front, so at any
/// instant edge arrivals are processed before cloud returns scheduled for the
/// same microsecond.
pub fn run_simulation(
    config: &SimConfig,
    backend: &CloudBackend,
    trace: &Trace,
) -> Result<SimOutput, SimError> {
    let mut sim = Simulator::new(config.clone(), backend)?;
    for entry in trace.iter() {
        sim.client_issue(entry.request.clone())?;
    }
    sim.finish()
}
