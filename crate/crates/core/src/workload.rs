//! Seeded multi-user request traces.
//!
//! Every user draws a task kind from `kind_mix` and a catalog object from a
//! Zipf popularity law. Recognition requests carry a noisy feature vector of
//! the object; model and panorama requests carry the SHA-256 of the object's
//! canonical bytes. Users share the catalog, which is where the redundancy
//! the edge cache exploits comes from.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): the workload seed keys the
//! generator and user `u` reads stream `u + 1`, so traces are reproducible on
//! every platform and independent of the number of users generated before.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::descriptor::{object_hash, stub_extract, Descriptor, PerKind, TaskKind};
use crate::netmodel::ms_to_us;
use crate::tiers::TaskRequest;
use crate::wire;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Evenly spaced requests; users are phase-shifted by `mean / users`.
    Fixed,
    /// Poisson arrivals per user.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSpec {
    pub process: ArrivalProcess,
    pub mean_interarrival_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub users: u32,
    pub requests_per_user: u32,
    pub catalog_size: u64,
    pub zipf_s: f64,
    pub kind_mix: PerKind<f64>,
    pub sigma: f64,
    pub feature_dim: usize,
    pub arrival: ArrivalSpec,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidParameter(m));
        if self.users == 0 || self.requests_per_user == 0 || self.catalog_size == 0 {
            return bad("users, requests_per_user and catalog_size must be >= 1".into());
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return bad(format!(
                "zipf_s must be finite and >= 0, got {}",
                self.zipf_s
            ));
        }
        let mut sum = 0.0;
        for (kind, &w) in self.kind_mix.iter() {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("kind_mix.{kind} must be finite and >= 0, got {w}"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("kind_mix must sum to 1, got {sum}"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.feature_dim == 0 || self.feature_dim > u16::MAX as usize {
            return bad(format!(
                "feature_dim must be in 1..=65535, got {}",
                self.feature_dim
            ));
        }
        let mean = self.arrival.mean_interarrival_ms;
        let ok = match self.arrival.process {
            ArrivalProcess::Fixed => mean >= 0.0 && mean.is_finite(),
            ArrivalProcess::Exponential => mean > 0.0 && mean.is_finite(),
        };
        if !ok {
            return bad(format!("invalid mean_interarrival_ms {mean}"));
        }
        Ok(())
    }

    pub fn total_requests(&self) -> u64 {
        u64::from(self.users) * u64::from(self.requests_per_user)
    }
}

/// Inverse-CDF sampler over `[0, n)` with `P(i) ∝ 1 / (i + 1)^s`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: u64, s: f64) -> Result<Self, WorkloadError> {
        if n == 0 {
            return Err(WorkloadError::InvalidParameter(
                "catalog size must be >= 1".into(),
            ));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(WorkloadError::InvalidParameter(format!(
                "zipf exponent must be finite and >= 0, got {s}"
            )));
        }
        let mut acc = 0.0;
        let cdf = (1..=n)
            .map(|k| {
                acc += (k as f64).powf(-s);
                acc
            })
            .collect();
        Ok(ZipfSampler { cdf })
    }

    pub fn len(&self) -> u64 {
        self.cdf.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let total = *self.cdf.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.cdf.len() - 1) as u64
    }
}

/// One draw from a Zipf(`n`, `s`) law.
pub fn zipf_sample<R: Rng + ?Sized>(n: u64, s: f64, rng: &mut R) -> Result<u64, WorkloadError> {
    Ok(ZipfSampler::new(n, s)?.sample(rng))
}

/// A generated request plus the catalog object it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub request: TaskRequest,
    pub object_id: u64,
}

/// Requests sorted by `(issued_at, request_id)` with ids dense from 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter()
    }

    /// Serializes to the line-oriented text format:
    ///
    /// ```text
    /// # coic-trace v1
    /// <request_id> <user_id> <issued_at_us> <kind> <object_id> <descriptor_hex>
    /// ```
    ///
    /// The descriptor hex is the wire encoding of the descriptor.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# coic-trace v1\n");
        let mut desc = Vec::new();
        for e in &self.entries {
            desc.clear();
            wire::put_descriptor(&mut desc, &e.request.descriptor);
            writeln!(
                out,
                "{} {} {} {} {} {}",
                e.request.request_id,
                e.request.user_id,
                e.request.issued_at,
                e.request.kind,
                e.object_id,
                hex::encode(&desc)
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, WorkloadError> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| WorkloadError::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let num =
                |s: &str, name: &str| s.parse::<u64>().map_err(|e| err(format!("{name}: {e}")));
            let request_id = num(fields[0], "request_id")?;
            let user_id = u32::try_from(num(fields[1], "user_id")?)
                .map_err(|_| err("user_id exceeds u32".into()))?;
            let issued_at = num(fields[2], "issued_at_us")?;
            let kind = TaskKind::parse(fields[3])
                .ok_or_else(|| err(format!("unknown kind {}", fields[3])))?;
            let object_id = num(fields[4], "object_id")?;
            let raw = hex::decode(fields[5]).map_err(|e| err(format!("descriptor: {e}")))?;
            let descriptor =
                wire::parse_descriptor(kind, &raw).map_err(|e| err(format!("descriptor: {e}")))?;
            entries.push(TraceEntry {
                request: TaskRequest {
                    request_id,
                    user_id,
                    kind,
                    descriptor,
                    issued_at,
                },
                object_id,
            });
        }
        Ok(Trace { entries })
    }

    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        Self::from_reader(text.as_bytes())
    }

    /// SHA-256 over the text serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// Descriptor a client would send for `object_id` of `kind`.
pub fn object_descriptor(
    kind: TaskKind,
    object_id: u64,
    noise_seed: u64,
    sigma: f64,
    dim: usize,
) -> Result<Descriptor, WorkloadError> {
    let map =
        |e: crate::descriptor::DescriptorError| WorkloadError::InvalidParameter(e.to_string());
    if kind.uses_vector_key() {
        Ok(Descriptor::recognition(
            stub_extract(object_id, noise_seed, sigma, dim).map_err(map)?,
        ))
    } else {
        Descriptor::hashed(kind, object_hash(object_id)).map_err(map)
    }
}

pub fn generate_trace(spec: &WorkloadSpec) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let zipf = ZipfSampler::new(spec.catalog_size, spec.zipf_s)?;
    let weights: Vec<f64> = TaskKind::ALL
        .iter()
        .map(|k| *spec.kind_mix.get(*k))
        .collect();
    let mean = spec.arrival.mean_interarrival_ms;

    // (issued_at, user, seq) sorts the merged per-user streams.
    let mut drafts = Vec::with_capacity(spec.total_requests() as usize);
    for user in 0..spec.users {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::from(user) + 1);
        let exp = match spec.arrival.process {
            ArrivalProcess::Exponential => Some(
                Exp::new(1.0 / mean).map_err(|e| WorkloadError::InvalidParameter(e.to_string()))?,
            ),
            ArrivalProcess::Fixed => None,
        };
        let mut t_ms = 0.0;
        for seq in 0..spec.requests_per_user {
            t_ms = match &exp {
                Some(exp) => t_ms + exp.sample(&mut rng),
                None => mean * (f64::from(seq) + f64::from(user) / f64::from(spec.users)),
            };
            let kind = pick_kind(&weights, rng.random::<f64>());
            let object_id = zipf.sample(&mut rng);
            let noise_seed = rng.next_u64();
            let descriptor =
                object_descriptor(kind, object_id, noise_seed, spec.sigma, spec.feature_dim)?;
            drafts.push((ms_to_us(t_ms), user, seq, kind, object_id, descriptor));
        }
    }
    drafts.sort_by_key(|d| (d.0, d.1, d.2));

    let entries = drafts
        .into_iter()
        .enumerate()
        .map(
            |(i, (issued_at, user_id, _, kind, object_id, descriptor))| TraceEntry {
                request: TaskRequest {
                    request_id: i as u64,
                    user_id,
                    kind,
                    descriptor,
                    issued_at,
                },
                object_id,
            },
        )
        .collect();
    Ok(Trace { entries })
}

fn pick_kind(weights: &[f64], u: f64) -> TaskKind {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return TaskKind::ALL[i];
            }
        }
    }
    TaskKind::ALL[last_positive]
}
