//! Task kinds, feature descriptors and the distance functions used to match them.
//!
//! Recognition requests are keyed by a dense feature vector and matched by
//! distance; model-render and panorama requests are keyed by a SHA-256 digest of
//! the content and matched by equality. [`stub_extract`] stands in for the
//! on-device feature extractor: it produces a fixed unit-norm centroid per
//! object plus seeded Gaussian noise, so "same object seen from a different
//! angle" becomes a tunable `sigma`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default feature-vector dimensionality.
pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Stream tag mixed into centroid seeds so that centroid generation never
/// shares a PRNG stream with per-request noise.
const CENTROID_STREAM: u64 = 0xC0_1C_CE_47;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine distance is undefined for a zero-norm vector")]
    ZeroNormVector,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("descriptor key does not match task kind {0}")]
    KindMismatch(TaskKind),
}

/// The three cached task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ObjectRecognition,
    #[serde(rename = "model_render_3d")]
    ModelRender3D,
    VrPanorama,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::ObjectRecognition,
        TaskKind::ModelRender3D,
        TaskKind::VrPanorama,
    ];

    /// Recognition is keyed by feature vectors, everything else by content hash.
    pub fn uses_vector_key(self) -> bool {
        matches!(self, TaskKind::ObjectRecognition)
    }

    /// One-byte code used on the wire.
    pub fn code(self) -> u8 {
        match self {
            TaskKind::ObjectRecognition => 1,
            TaskKind::ModelRender3D => 2,
            TaskKind::VrPanorama => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(TaskKind::ObjectRecognition),
            2 => Some(TaskKind::ModelRender3D),
            3 => Some(TaskKind::VrPanorama),
            _ => None,
        }
    }

    /// Stable name used in CSV and trace files.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ObjectRecognition => "object_recognition",
            TaskKind::ModelRender3D => "model_render_3d",
            TaskKind::VrPanorama => "vr_panorama",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per [`TaskKind`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerKind<T> {
    pub object_recognition: T,
    pub model_render_3d: T,
    pub vr_panorama: T,
}

impl<T> PerKind<T> {
    pub fn uniform(value: T) -> Self
    where
        T: Clone,
    {
        PerKind {
            object_recognition: value.clone(),
            model_render_3d: value.clone(),
            vr_panorama: value,
        }
    }

    pub fn get(&self, kind: TaskKind) -> &T {
        match kind {
            TaskKind::ObjectRecognition => &self.object_recognition,
            TaskKind::ModelRender3D => &self.model_render_3d,
            TaskKind::VrPanorama => &self.vr_panorama,
        }
    }

    pub fn get_mut(&mut self, kind: TaskKind) -> &mut T {
        match kind {
            TaskKind::ObjectRecognition => &mut self.object_recognition,
            TaskKind::ModelRender3D => &mut self.model_render_3d,
            TaskKind::VrPanorama => &mut self.vr_panorama,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskKind, &T)> {
        TaskKind::ALL.into_iter().map(move |k| (k, self.get(k)))
    }
}

/// A non-empty vector of finite `f32` components.
///
/// Components are stored at wire precision (IEEE-754 binary32) so that a
/// vector survives a protocol round trip bit-for-bit; distances are
/// accumulated in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self, DescriptorError> {
        if values.is_empty() {
            return Err(DescriptorError::InvalidParameter(
                "feature vector must have dim >= 1".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DescriptorError::InvalidParameter(format!(
                "component {i} is not finite"
            )));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// A 256-bit content digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; 32]>::try_from(bytes).ok().map(ContentHash)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorKey {
    Vector(FeatureVector),
    Hash(ContentHash),
}

/// A task-kind-tagged lookup key. Construction guarantees that recognition
/// descriptors carry vectors and the other kinds carry hashes.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    kind: TaskKind,
    key: DescriptorKey,
}

impl Descriptor {
    pub fn recognition(vector: FeatureVector) -> Self {
        Descriptor {
            kind: TaskKind::ObjectRecognition,
            key: DescriptorKey::Vector(vector),
        }
    }

    pub fn hashed(kind: TaskKind, hash: ContentHash) -> Result<Self, DescriptorError> {
        if kind.uses_vector_key() {
            return Err(DescriptorError::KindMismatch(kind));
        }
        Ok(Descriptor {
            kind,
            key: DescriptorKey::Hash(hash),
        })
    }

    pub fn new(kind: TaskKind, key: DescriptorKey) -> Result<Self, DescriptorError> {
        match (kind.uses_vector_key(), key) {
            (true, DescriptorKey::Vector(v)) => Ok(Descriptor::recognition(v)),
            (false, DescriptorKey::Hash(h)) => Descriptor::hashed(kind, h),
            _ => Err(DescriptorError::KindMismatch(kind)),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn key(&self) -> &DescriptorKey {
        &self.key
    }

    pub fn as_vector(&self) -> Option<&FeatureVector> {
        match &self.key {
            DescriptorKey::Vector(v) => Some(v),
            DescriptorKey::Hash(_) => None,
        }
    }

    pub fn as_hash(&self) -> Option<&ContentHash> {
        match &self.key {
            DescriptorKey::Hash(h) => Some(h),
            DescriptorKey::Vector(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    EuclideanL2,
    /// `1 - cos(a, b)`, in `[0, 2]`.
    Cosine,
}

/// Distance between two feature vectors under `metric`.
pub fn distance(
    a: &FeatureVector,
    b: &FeatureVector,
    metric: DistanceMetric,
) -> Result<f64, DescriptorError> {
    if a.dim() != b.dim() {
        return Err(DescriptorError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    match metric {
        DistanceMetric::EuclideanL2 => Ok(a
            .0
            .iter()
            .zip(&b.0)
            .map(|(&x, &y)| {
                let d = f64::from(x) - f64::from(y);
                d * d
            })
            .sum::<f64>()
            .sqrt()),
        DistanceMetric::Cosine => {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return Err(DescriptorError::ZeroNormVector);
            }
            if a == b {
                return Ok(0.0);
            }
            let dot: f64 =
                a.0.iter()
                    .zip(&b.0)
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum();
            Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
        }
    }
}

/// SHA-256 of `content`.
pub fn hash_content(content: &[u8]) -> ContentHash {
    ContentHash(Sha256::digest(content).into())
}

/// The canonical byte image of catalog object `object_id`: its big-endian id
/// repeated to fill a 256-byte block.
pub fn canonical_object_bytes(object_id: u64) -> [u8; 256] {
    let mut block = [0u8; 256];
    for chunk in block.chunks_exact_mut(8) {
        chunk.copy_from_slice(&object_id.to_be_bytes());
    }
    block
}

/// Content hash of catalog object `object_id`.
pub fn object_hash(object_id: u64) -> ContentHash {
    hash_content(&canonical_object_bytes(object_id))
}

/// Unit-norm centroid for `object_id`, stored at `f64` precision.
pub fn centroid(object_id: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(object_id);
    rng.set_stream(CENTROID_STREAM);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Deterministic stand-in for client-side feature extraction:
/// `centroid(object_id) + N(0, sigma^2)` per component, noise drawn from a
/// ChaCha8 stream seeded by `user_noise_seed`.
pub fn stub_extract(
    object_id: u64,
    user_noise_seed: u64,
    sigma: f64,
    dim: usize,
) -> Result<FeatureVector, DescriptorError> {
    if dim == 0 {
        return Err(DescriptorError::InvalidParameter("dim must be >= 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DescriptorError::InvalidParameter(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let base = centroid(object_id, dim);
    let values = if sigma == 0.0 {
        base.into_iter().map(|x| x as f32).collect()
    } else {
        let noise = Normal::new(0.0, sigma)
            .map_err(|e| DescriptorError::InvalidParameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(user_noise_seed);
        base.into_iter()
            .map(|x| (x + noise.sample(&mut rng)) as f32)
            .collect()
    };
    FeatureVector::new(values)
}
