//! Client, edge and cloud roles and the request lifecycle.
//!
//! A request is extracted on the client, sent to the edge, looked up in the
//! edge cache and either answered from the cache or forwarded to the cloud.
//! The cloud's answer is inserted into the edge cache on its way back. The
//! same lifecycle runs on the deterministic event loop in [`sim`] and over TCP
//! in [`net`].

pub mod net;
pub mod sim;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::descriptor::{
    centroid, object_hash, ContentHash, Descriptor, DescriptorKey, FeatureVector, TaskKind,
};
use crate::netmodel::{ComputeSpec, SizeSpec};
use crate::simcache::ResultPayload;

pub use sim::{run_simulation, EdgeOutcome, Record, SimConfig, SimError, SimOutput, Simulator};

/// Where a response was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServedFrom {
    Edge,
    Cloud,
}

impl ServedFrom {
    pub fn code(self) -> u8 {
        match self {
            ServedFrom::Edge => 1,
            ServedFrom::Cloud => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ServedFrom::Edge),
            2 => Some(ServedFrom::Cloud),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ServedFrom::Edge => "edge",
            ServedFrom::Cloud => "cloud",
        }
    }
}

impl fmt::Display for ServedFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A client request. `issued_at` is in virtual microseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub request_id: u64,
    pub user_id: u32,
    pub kind: TaskKind,
    pub descriptor: Descriptor,
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResponse {
    pub request_id: u64,
    pub result: ResultPayload,
    pub served_from: ServedFrom,
    pub completed_at: u64,
}

/// What the cloud computes a result from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResultKey {
    /// A recognized catalog object.
    Object(u64),
    /// The content named by a hash descriptor.
    Hash(ContentHash),
}

/// Deterministic stand-in for cloud-side recognition and model loading.
///
/// A result payload is a 32-byte tag, `SHA-256(kind || key)`, repeated to the
/// kind's configured `result_bytes`. Recognition vectors resolve to the
/// catalog object with the nearest centroid, so two noisy views of one object
/// receive identical results.
#[derive(Debug, Clone)]
pub struct CloudBackend {
    compute: ComputeSpec,
    sizes: SizeSpec,
    dim: usize,
    centroids: Vec<Vec<f64>>,
    /// Payloads already built, so repeated answers share one buffer.
    memo: Arc<Mutex<HashMap<(TaskKind, ResultKey), ResultPayload>>>,
}

const MEMO_LIMIT: usize = 1024;

impl CloudBackend {
    /// `catalog_size` and `dim` describe the recognition catalog. Pass a
    /// catalog size of 0 when no recognition traffic is expected.
    pub fn new(compute: ComputeSpec, sizes: SizeSpec, catalog_size: u64, dim: usize) -> Self {
        let centroids = (0..catalog_size).map(|id| centroid(id, dim)).collect();
        CloudBackend {
            compute,
            sizes,
            dim,
            centroids,
            memo: Arc::default(),
        }
    }

    pub fn compute(&self) -> &ComputeSpec {
        &self.compute
    }

    pub fn sizes(&self) -> &SizeSpec {
        &self.sizes
    }

    /// Catalog object whose centroid is nearest to `v` (lowest id on ties).
    pub fn nearest_object(&self, v: &FeatureVector) -> Option<u64> {
        if v.dim() != self.dim {
            return None;
        }
        let mut best: Option<(u64, f64)> = None;
        for (id, c) in self.centroids.iter().enumerate() {
            let d: f64 = c
                .iter()
                .zip(v.values())
                .map(|(&a, &b)| {
                    let x = a - f64::from(b);
                    x * x
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id as u64, d));
            }
        }
        best.map(|(id, _)| id)
    }

    pub fn resolve(&self, descriptor: &Descriptor) -> ResultKey {
        match descriptor.key() {
            DescriptorKey::Hash(h) => ResultKey::Hash(*h),
            DescriptorKey::Vector(v) => match self.nearest_object(v) {
                Some(id) => ResultKey::Object(id),
                // Outside the catalog: key the result by the vector itself.
                None => {
                    let mut h = Sha256::new();
                    for x in v.values() {
                        h.update(x.to_be_bytes());
                    }
                    ResultKey::Hash(ContentHash(h.finalize().into()))
                }
            },
        }
    }

    pub fn result_tag(kind: TaskKind, key: ResultKey) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([kind.code()]);
        match key {
            ResultKey::Object(id) => {
                h.update([0u8]);
                h.update(id.to_be_bytes());
            }
            ResultKey::Hash(hash) => {
                h.update([1u8]);
                h.update(hash.as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn result_for_key(&self, kind: TaskKind, key: ResultKey) -> ResultPayload {
        let mut memo = self.memo.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = memo.get(&(kind, key)) {
            return p.clone();
        }
        let tag = Self::result_tag(kind, key);
        let len = self.sizes.get(kind).result_bytes as usize;
        let bytes: Vec<u8> = tag.iter().copied().cycle().take(len).collect();
        let payload = ResultPayload::new(bytes).expect("result_bytes >= 1");
        if memo.len() >= MEMO_LIMIT {
            memo.clear();
        }
        memo.insert((kind, key), payload.clone());
        payload
    }

    /// The result the cloud returns for `descriptor`.
    pub fn result_for(&self, descriptor: &Descriptor) -> ResultPayload {
        self.result_for_key(descriptor.kind(), self.resolve(descriptor))
    }

    /// Key of the correct result for ground-truth `object_id`.
    pub fn truth_key(kind: TaskKind, object_id: u64) -> ResultKey {
        if kind.uses_vector_key() {
            ResultKey::Object(object_id)
        } else {
            ResultKey::Hash(object_hash(object_id))
        }
    }

    /// Whether `payload` is the correct result for `object_id`. Payloads are a
    /// function of their tag, so comparing the tag prefix and length suffices.
    pub fn is_correct_result(
        &self,
        kind: TaskKind,
        object_id: u64,
        payload: &ResultPayload,
    ) -> bool {
        let tag = Self::result_tag(kind, Self::truth_key(kind, object_id));
        let expected_len = self.sizes.get(kind).result_bytes;
        let n = (expected_len as usize).min(32);
        payload.len() == expected_len && payload.as_bytes()[..n] == tag[..n]
    }
}
