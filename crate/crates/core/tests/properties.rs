mod support;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coic_core::descriptor::{
    distance, object_hash, stub_extract, Descriptor, DistanceMetric, FeatureVector, PerKind,
    TaskKind,
};
use coic_core::netmodel::{
    expected_mean_latency, latency_baseline, latency_hit, latency_miss, transfer_time, KindCompute,
    KindSizes, LinkSpec, Links,
};
use coic_core::simcache::{CacheConfig, InsertOutcome, Lookup, SimilarityCache};
use coic_core::tiers::{run_simulation, CloudBackend, ServedFrom, SimConfig};
use coic_core::wire::{self, Decoded, Decoder, Message, RequestMessage, ResponseMessage};
use coic_core::workload::{
    generate_trace, ArrivalProcess, ArrivalSpec, Trace, WorkloadSpec, ZipfSampler,
};
use coic_core::{ContentHash, ResultPayload};

use support::{tagged_payload, OracleCache, OracleInsert, OracleLookup};

fn feature(dim: usize) -> impl Strategy<Value = FeatureVector> {
    vec(-10.0f32..10.0, dim).prop_map(|v| FeatureVector::new(v).unwrap())
}

fn nonzero_feature(dim: usize) -> impl Strategy<Value = FeatureVector> {
    feature(dim).prop_filter("non-zero", |v| v.norm() > 1e-3)
}

proptest! {
    #[test]
    fn l2_is_a_metric(a in feature(6), b in feature(6), c in feature(6)) {
        let d = |x, y| distance(x, y, DistanceMetric::EuclideanL2).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(a in nonzero_feature(5), b in nonzero_feature(5), k in 0.1f32..8.0) {
        let d = distance(&a, &b, DistanceMetric::Cosine).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(d, distance(&b, &a, DistanceMetric::Cosine).unwrap());
        let scaled = FeatureVector::new(a.values().iter().map(|x| x * k).collect()).unwrap();
        let ds = distance(&scaled, &b, DistanceMetric::Cosine).unwrap();
        prop_assert!((d - ds).abs() < 1e-5);
    }

    #[test]
    fn transfer_time_is_affine_in_size(bw in 1e3f64..1e11, prop_ms in 0.0f64..100.0, a in 0u64..1u64 << 32, b in 0u64..1u64 << 32) {
        let link = LinkSpec::new(bw, prop_ms).unwrap();
        let t = |n| transfer_time(&link, n) - prop_ms;
        let sum = t(a) + t(b);
        let joint = t(a + b);
        prop_assert!((joint - sum).abs() <= 1e-9 * joint.abs().max(1.0));
        prop_assert!(transfer_time(&link, a) >= prop_ms);
    }

    #[test]
    fn hit_never_slower_than_miss(
        bw_me in 1e5f64..1e10, bw_ec in 1e5f64..1e10, p_me in 0.0f64..50.0, p_ec in 0.0f64..50.0,
        compute in 0.0f64..500.0, lookup in 0.0f64..10.0, extract in 0.0f64..100.0,
        desc in 1u64..10_000, result in 1u64..50_000_000, h in 0.0f64..=1.0,
    ) {
        let links = Links { me: LinkSpec::new(bw_me, p_me).unwrap(), ec: LinkSpec::new(bw_ec, p_ec).unwrap() };
        let c = PerKind::uniform(KindCompute { cloud_compute_ms: compute, edge_lookup_ms: lookup, client_extract_ms: extract });
        let s = PerKind::uniform(KindSizes { request_descriptor_bytes: desc, result_bytes: result });
        let k = TaskKind::VrPanorama;
        let (hit, miss, base) = (latency_hit(k, &links, &c, &s), latency_miss(k, &links, &c, &s), latency_baseline(k, &links, &c, &s));
        prop_assert!(hit <= miss);
        prop_assert!((miss - base - lookup).abs() < 1e-6 * miss.max(1.0));
        let mean = expected_mean_latency(h, hit, miss).unwrap();
        prop_assert!(mean >= hit - 1e-9 && mean <= miss + 1e-9);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Lookup(Descriptor),
    Insert(Descriptor, u64),
}

fn descriptor() -> impl Strategy<Value = Descriptor> {
    prop_oneof![
        vec(prop::sample::select(vec![-1.0f32, 0.0, 0.5, 1.0]), 2)
            .prop_map(|v| Descriptor::recognition(FeatureVector::new(v).unwrap())),
        (0u64..3)
            .prop_map(|i| Descriptor::hashed(TaskKind::ModelRender3D, object_hash(i)).unwrap()),
        (0u64..3).prop_map(|i| Descriptor::hashed(TaskKind::VrPanorama, object_hash(i)).unwrap()),
    ]
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    vec(
        prop_oneof![
            descriptor().prop_map(Op::Lookup),
            (descriptor(), 8u64..150).prop_map(|(d, s)| Op::Insert(d, s)),
        ],
        1..40,
    )
}

fn cache(beta: f64, capacity: u64) -> SimilarityCache {
    SimilarityCache::new(CacheConfig {
        beta,
        metric: DistanceMetric::EuclideanL2,
        capacity_bytes: capacity,
    })
    .unwrap()
}

proptest! {
    #[test]
    fn cache_agrees_with_oracle_and_stays_within_capacity(ops in ops(), beta in 0.0f64..2.0, capacity in 20u64..300) {
        let mut c = cache(beta, capacity);
        let mut o = OracleCache::new(beta, DistanceMetric::EuclideanL2, capacity);
        for (t, op) in ops.into_iter().enumerate() {
            let now = t as u64;
            match op {
                Op::Lookup(d) => {
                    let got = c.lookup(&d, now).unwrap();
                    match (got, o.lookup(&d, now)) {
                        (Lookup::Miss, OracleLookup::Miss) => {}
                        (Lookup::Hit { result, matched_distance }, OracleLookup::Hit { tag, distance }) => {
                            prop_assert_eq!(support::payload_tag(&result), tag);
                            prop_assert_eq!(matched_distance, distance);
                        }
                        (g, w) => prop_assert!(false, "{:?} vs {:?}", g, w),
                    }
                }
                Op::Insert(d, size) => {
                    let got = c.insert(d.clone(), tagged_payload(now, size), now);
                    let want = o.insert(d, now, size, now);
                    prop_assert_eq!(got.evicted().len(), match &want {
                        OracleInsert::Inserted { evicted } | OracleInsert::Replaced { evicted } => evicted.len(),
                        OracleInsert::Rejected => 0,
                    });
                    prop_assert_eq!(matches!(got, InsertOutcome::RejectedTooLarge), want == OracleInsert::Rejected);
                }
            }
            let s = c.stats();
            prop_assert!(s.bytes_resident <= capacity);
            prop_assert_eq!(s.bytes_resident, o.resident());
            prop_assert_eq!(s.lookups, s.hits + s.misses);
        }
    }

    #[test]
    fn larger_beta_never_loses_a_hit(ops in ops(), query in descriptor(), b1 in 0.0f64..1.5, extra in 0.0f64..1.5) {
        let mut small = cache(b1, 10_000);
        let mut large = cache(b1 + extra, 10_000);
        for (t, op) in ops.into_iter().enumerate() {
            if let Op::Insert(d, size) = op {
                small.insert(d.clone(), tagged_payload(t as u64, size), t as u64);
                large.insert(d, tagged_payload(t as u64, size), t as u64);
            }
        }
        if small.lookup(&query, 1_000).unwrap().is_hit() {
            prop_assert!(large.lookup(&query, 1_000).unwrap().is_hit());
        }
    }

    #[test]
    fn lookup_after_insert_hits(ops in ops(), d in descriptor(), size in 8u64..100) {
        let mut c = cache(0.0, 1_000);
        for (t, op) in ops.into_iter().enumerate() {
            if let Op::Insert(k, s) = op {
                c.insert(k, tagged_payload(t as u64, s), t as u64);
            }
        }
        c.insert(d.clone(), tagged_payload(999, size), 500);
        match c.lookup(&d, 501).unwrap() {
            Lookup::Hit { result, matched_distance } => {
                prop_assert_eq!(support::payload_tag(&result), 999);
                prop_assert_eq!(matched_distance, 0.0);
            }
            Lookup::Miss => prop_assert!(false, "miss right after insert"),
        }
    }

    #[test]
    fn namespaces_never_cross(i in 0u64..50, j in 0u64..50) {
        let mut c = cache(10.0, 1_000);
        c.insert(Descriptor::hashed(TaskKind::ModelRender3D, object_hash(i)).unwrap(), tagged_payload(1, 8), 0);
        let other_kind = Descriptor::hashed(TaskKind::VrPanorama, object_hash(i)).unwrap();
        prop_assert!(!c.lookup(&other_kind, 1).unwrap().is_hit());
        let same_kind = Descriptor::hashed(TaskKind::ModelRender3D, object_hash(j)).unwrap();
        prop_assert_eq!(c.lookup(&same_kind, 2).unwrap().is_hit(), i == j);
    }
}

fn message() -> impl Strategy<Value = Message> {
    let request = (
        any::<u64>(),
        any::<u32>(),
        prop_oneof![
            vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..80)
                .prop_map(|v| Descriptor::recognition(FeatureVector::new(v).unwrap())),
            (
                prop::sample::select(vec![TaskKind::ModelRender3D, TaskKind::VrPanorama]),
                any::<[u8; 32]>()
            )
                .prop_map(|(k, h)| Descriptor::hashed(k, ContentHash(h)).unwrap()),
        ],
    )
        .prop_map(|(request_id, user_id, descriptor)| {
            Message::Request(RequestMessage {
                request_id,
                user_id,
                descriptor,
            })
        });
    let response = (any::<u64>(), any::<bool>(), vec(any::<u8>(), 1..512)).prop_map(
        |(request_id, edge, body)| {
            Message::Response(ResponseMessage {
                request_id,
                served_from: if edge {
                    ServedFrom::Edge
                } else {
                    ServedFrom::Cloud
                },
                result: ResultPayload::new(body).unwrap(),
            })
        },
    );
    prop_oneof![request, response]
}

proptest! {
    #[test]
    fn wire_round_trips(m in message()) {
        let bytes = wire::encode(&m);
        match wire::decode(&bytes).unwrap() {
            Decoded::Frame(back, used) => {
                prop_assert_eq!(back, m);
                prop_assert_eq!(used, bytes.len());
            }
            Decoded::NeedMoreBytes => prop_assert!(false),
        }
    }

    #[test]
    fn every_strict_prefix_needs_more(m in message(), cut in any::<prop::sample::Index>()) {
        let bytes = wire::encode(&m);
        let n = cut.index(bytes.len());
        prop_assert!(matches!(wire::decode(&bytes[..n]), Ok(Decoded::NeedMoreBytes)));
    }

    #[test]
    fn streaming_decoder_splits_anywhere(ms in vec(message(), 1..5), chunk in 1usize..64) {
        let stream: Vec<u8> = ms.iter().flat_map(wire::encode).collect();
        let mut dec = Decoder::default();
        let mut out = Vec::new();
        for piece in stream.chunks(chunk) {
            dec.push(piece);
            while let Some(m) = dec.next_message().unwrap() {
                out.push(m);
            }
        }
        dec.finish().unwrap();
        prop_assert_eq!(out, ms);
    }

    #[test]
    fn decode_never_panics(bytes in vec(any::<u8>(), 0..256)) {
        let _ = wire::decode(&bytes);
        let mut framed = wire::MAGIC.to_vec();
        framed.extend_from_slice(&bytes);
        let _ = wire::decode(&framed);
    }
}

fn workload() -> impl Strategy<Value = WorkloadSpec> {
    (
        1u32..5,
        1u32..40,
        1u64..30,
        0.0f64..1.5,
        0.0f64..1.0,
        0.0f64..1.0,
        any::<bool>(),
        1.0f64..200.0,
        any::<u64>(),
    )
        .prop_map(|(users, rpu, catalog, s, m0, m1, exp, mean, seed)| {
            let m1 = m1 * (1.0 - m0);
            WorkloadSpec {
                users,
                requests_per_user: rpu,
                catalog_size: catalog,
                zipf_s: s,
                kind_mix: PerKind {
                    object_recognition: m0,
                    model_render_3d: m1,
                    vr_panorama: 1.0 - m0 - m1,
                },
                sigma: 0.02,
                feature_dim: 8,
                arrival: ArrivalSpec {
                    process: if exp {
                        ArrivalProcess::Exponential
                    } else {
                        ArrivalProcess::Fixed
                    },
                    mean_interarrival_ms: mean,
                },
                seed,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn traces_are_seeded_sorted_and_survive_text(spec in workload()) {
        let t = generate_trace(&spec).unwrap();
        prop_assert_eq!(t.len() as u64, spec.total_requests());
        prop_assert_eq!(&t, &generate_trace(&spec).unwrap());
        for (i, e) in t.iter().enumerate() {
            prop_assert_eq!(e.request.request_id, i as u64);
            prop_assert!(e.object_id < spec.catalog_size);
            prop_assert_eq!(e.request.descriptor.kind(), e.request.kind);
        }
        prop_assert!(t.entries.windows(2).all(|w| w[0].request.issued_at <= w[1].request.issued_at));
        let back = Trace::parse(&t.to_text()).unwrap();
        prop_assert_eq!(back.digest(), t.digest());
    }

    #[test]
    fn simulated_latencies_follow_closed_forms(spec in workload(), beta in 0.0f64..1.0, bw in 1e6f64..1e9) {
        let links = Links { me: LinkSpec::new(400e6, 3.0).unwrap(), ec: LinkSpec::new(bw, 12.0).unwrap() };
        let compute = PerKind::uniform(KindCompute { cloud_compute_ms: 40.0, edge_lookup_ms: 1.5, client_extract_ms: 7.0 });
        let sizes = PerKind::uniform(KindSizes { request_descriptor_bytes: 300, result_bytes: 70_000 });
        let config = SimConfig {
            links, compute, sizes,
            cache: Some(CacheConfig { beta, metric: DistanceMetric::EuclideanL2, capacity_bytes: 1 << 20 }),
        };
        let trace = generate_trace(&spec).unwrap();
        let backend = CloudBackend::new(compute, sizes, spec.catalog_size, spec.feature_dim);
        let out = run_simulation(&config, &backend, &trace).unwrap();
        let stats = out.cache_stats.unwrap();
        let mut edge = 0;
        for r in &out.records {
            let closed = match r.served_from {
                ServedFrom::Edge => { edge += 1; latency_hit(r.kind, &links, &compute, &sizes) }
                ServedFrom::Cloud => latency_miss(r.kind, &links, &compute, &sizes),
            };
            prop_assert!((r.latency_us as f64 - closed * 1000.0).abs() <= 0.5 + 1e-6);
            prop_assert_eq!(r.completed_at - r.issued_at, r.latency_us);
        }
        prop_assert_eq!(stats.hits, edge);
        prop_assert_eq!(stats.lookups, trace.len() as u64);
    }
}

#[test]
fn zipf_frequencies_pass_chi_square() {
    let n = 10u64;
    let s = 1.0;
    let sampler = ZipfSampler::new(n, s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 200_000;
    let mut counts = vec![0u64; n as usize];
    for _ in 0..draws {
        counts[sampler.sample(&mut rng) as usize] += 1;
    }
    let z: f64 = (1..=n).map(|k| 1.0 / (k as f64).powf(s)).sum();
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let e = draws as f64 / ((i + 1) as f64).powf(s) / z;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 9 degrees of freedom; the 0.999 quantile is 27.88.
    assert!(chi2 < 27.88, "chi-square {chi2}");
}

#[test]
fn stub_views_cluster_by_object() {
    // Same-object views sit near sqrt(2 * dim) * sigma apart; distinct
    // objects sit near sqrt(2), so beta = 0.5 separates them at sigma = 0.01.
    let (dim, sigma) = (64, 0.01);
    let mut worst_same = 0.0f64;
    let mut best_cross = f64::INFINITY;
    for obj in 0..20u64 {
        let a = stub_extract(obj, 1, sigma, dim).unwrap();
        let b = stub_extract(obj, 2, sigma, dim).unwrap();
        worst_same = worst_same.max(distance(&a, &b, DistanceMetric::EuclideanL2).unwrap());
        let c = stub_extract(obj + 100, 3, sigma, dim).unwrap();
        best_cross = best_cross.min(distance(&a, &c, DistanceMetric::EuclideanL2).unwrap());
    }
    assert!(
        worst_same < 0.5 && best_cross > 0.5,
        "same {worst_same}, cross {best_cross}"
    );
}
