//! Link, compute and payload-size models plus the closed-form latencies that
//! the simulator must reproduce.
//!
//! Links are store-and-forward with no queueing: a transfer of `n` bytes costs
//! `propagation_ms + 8n / bandwidth_bps` seconds-scaled-to-ms regardless of
//! what else is on the link.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{PerKind, TaskKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A point-to-point link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub propagation_ms: f64,
}

impl LinkSpec {
    pub fn new(bandwidth_bps: f64, propagation_ms: f64) -> Result<Self, ModelError> {
        let link = LinkSpec {
            bandwidth_bps,
            propagation_ms,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "bandwidth_bps must be finite and > 0, got {}",
                self.bandwidth_bps
            )));
        }
        if !(self.propagation_ms >= 0.0 && self.propagation_ms.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "propagation_ms must be finite and >= 0, got {}",
                self.propagation_ms
            )));
        }
        Ok(())
    }

    /// Milliseconds to move `size_bytes` across this link.
    pub fn transfer_time_ms(&self, size_bytes: u64) -> f64 {
        self.propagation_ms + (size_bytes as f64 * 8.0 / self.bandwidth_bps) * 1000.0
    }
}

/// Free-function form of [`LinkSpec::transfer_time_ms`].
pub fn transfer_time(link: &LinkSpec, size_bytes: u64) -> f64 {
    link.transfer_time_ms(size_bytes)
}

/// Per-kind processing times, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindCompute {
    pub cloud_compute_ms: f64,
    pub edge_lookup_ms: f64,
    pub client_extract_ms: f64,
}

pub type ComputeSpec = PerKind<KindCompute>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindSizes {
    pub request_descriptor_bytes: u64,
    pub result_bytes: u64,
}

pub type SizeSpec = PerKind<KindSizes>;

pub fn validate_compute(compute: &ComputeSpec) -> Result<(), ModelError> {
    for (kind, c) in compute.iter() {
        for (name, v) in [
            ("cloud_compute_ms", c.cloud_compute_ms),
            ("edge_lookup_ms", c.edge_lookup_ms),
            ("client_extract_ms", c.client_extract_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidParameter(format!(
                    "{kind}.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
    }
    Ok(())
}

pub fn validate_sizes(sizes: &SizeSpec) -> Result<(), ModelError> {
    for (kind, s) in sizes.iter() {
        if s.request_descriptor_bytes == 0 || s.result_bytes == 0 {
            return Err(ModelError::InvalidParameter(format!(
                "{kind}: descriptor and result sizes must be >= 1 byte"
            )));
        }
    }
    Ok(())
}

/// The two links of a deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Links {
    /// Mobile client to edge.
    pub me: LinkSpec,
    /// Edge to cloud.
    pub ec: LinkSpec,
}

/// End-to-end latency of an edge hit.
pub fn latency_hit(kind: TaskKind, links: &Links, compute: &ComputeSpec, sizes: &SizeSpec) -> f64 {
    let c = compute.get(kind);
    let s = sizes.get(kind);
    c.client_extract_ms
        + links.me.transfer_time_ms(s.request_descriptor_bytes)
        + c.edge_lookup_ms
        + links.me.transfer_time_ms(s.result_bytes)
}

/// End-to-end latency of an edge miss served by the cloud.
///
/// Terms are summed in the order the request experiences them, which is also
/// the order the simulator accumulates them in.
pub fn latency_miss(kind: TaskKind, links: &Links, compute: &ComputeSpec, sizes: &SizeSpec) -> f64 {
    let c = compute.get(kind);
    let s = sizes.get(kind);
    c.client_extract_ms
        + links.me.transfer_time_ms(s.request_descriptor_bytes)
        + c.edge_lookup_ms
        + links.ec.transfer_time_ms(s.request_descriptor_bytes)
        + c.cloud_compute_ms
        + links.ec.transfer_time_ms(s.result_bytes)
        + links.me.transfer_time_ms(s.result_bytes)
}

/// Latency with the cache bypassed entirely: a miss that pays no lookup.
pub fn latency_baseline(
    kind: TaskKind,
    links: &Links,
    compute: &ComputeSpec,
    sizes: &SizeSpec,
) -> f64 {
    let mut compute = *compute;
    compute.get_mut(kind).edge_lookup_ms = 0.0;
    latency_miss(kind, links, &compute, sizes)
}

/// `h * hit + (1 - h) * miss`.
pub fn expected_mean_latency(hit_rate: f64, l_hit: f64, l_miss: f64) -> Result<f64, ModelError> {
    if !(0.0..=1.0).contains(&hit_rate) {
        return Err(ModelError::InvalidParameter(format!(
            "hit rate must be in [0, 1], got {hit_rate}"
        )));
    }
    Ok(hit_rate * l_hit + (1.0 - hit_rate) * l_miss)
}

/// Converts a millisecond duration to whole microseconds, rounding half up.
pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0 + 0.5).floor() as u64
}

/// Simulation time in integer microseconds. Only moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now_us: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    /// Moves the clock to `t_us`.
    ///
    /// # Panics
    ///
    /// If `t_us` is earlier than the current time.
    pub fn advance_to(&mut self, t_us: u64) {
        assert!(
            t_us >= self.now_us,
            "virtual clock moved backwards: {} -> {}",
            self.now_us,
            t_us
        );
        self.now_us = t_us;
    }
}
