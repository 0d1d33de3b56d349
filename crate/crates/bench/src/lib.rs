//! Fixtures for the criterion benchmarks in `benches/`.

use coic_core::descriptor::{stub_extract, Descriptor, DistanceMetric, FeatureVector};
use coic_core::harness::ScenarioConfig;
use coic_core::simcache::{CacheConfig, ResultPayload, SimilarityCache};

pub const DIM: usize = 64;
pub const SIGMA: f64 = 0.01;

pub fn view(object: u64, noise: u64) -> FeatureVector {
    stub_extract(object, noise, SIGMA, DIM).expect("valid stub parameters")
}

/// A recognition cache holding one view of each of `objects` objects.
pub fn filled_cache(objects: u64) -> SimilarityCache {
    let mut cache = SimilarityCache::new(CacheConfig {
        beta: 0.5,
        metric: DistanceMetric::EuclideanL2,
        capacity_bytes: u64::MAX,
    })
    .expect("valid cache config");
    for id in 0..objects {
        let payload = ResultPayload::new(vec![id as u8; 4096]).expect("non-empty");
        cache.insert(Descriptor::recognition(view(id, 0)), payload, id);
    }
    cache
}

/// The shipped default scenario, for end-to-end runs.
pub fn default_scenario() -> ScenarioConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
    ScenarioConfig::load(std::path::Path::new(path)).expect("shipped config loads")
}
