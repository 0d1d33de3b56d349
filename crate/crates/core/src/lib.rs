//! Cooperative edge caching for compute-intensive mobile tasks.
//!
//! Clients describe each task with a compact descriptor (a feature vector for
//! recognition, a content hash for model loads and panoramas). An edge node
//! keeps a similarity cache of recent results keyed by those descriptors and
//! answers near-duplicate requests without contacting the cloud.
//!
//! The crate provides the descriptor types, the cache, an analytic latency
//! model, a deterministic discrete-event simulator of the client/edge/cloud
//! tiers, a TCP deployment of the same tiers, the wire codec they speak, a
//! seeded workload generator, and the experiment harness that ties them
//! together.

pub mod descriptor;
pub mod harness;
pub mod netmodel;
pub mod simcache;
pub mod tiers;
pub mod wire;
pub mod workload;

pub use descriptor::{
    distance, ContentHash, Descriptor, DescriptorError, DescriptorKey, DistanceMetric,
    FeatureVector, PerKind, TaskKind,
};
pub use harness::{run_scenario, HarnessError, Mode, RunReport, ScenarioConfig};
pub use netmodel::{ComputeSpec, KindCompute, KindSizes, LinkSpec, Links, SizeSpec};
pub use simcache::{CacheConfig, CacheStats, Lookup, ResultPayload, SharedCache, SimilarityCache};
pub use tiers::{
    CloudBackend, Record, ServedFrom, SimConfig, SimOutput, TaskRequest, TaskResponse,
};
pub use wire::{Message, ProtocolError};
pub use workload::{generate_trace, Trace, TraceEntry, WorkloadSpec};
