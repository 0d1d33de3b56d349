//! Experiment driver: scenario configs, baseline-vs-cache runs, aggregates and
//! CSV reports.
//!
//! A scenario is a JSON document. Every field is required except `sweep`;
//! units are spelled out in field names. A sweep is a list of axes, each a
//! JSON path into the config and a list of values. All axes must have the same
//! number of values and advance together, so one sweep point can move several
//! coupled parameters (for example a model's size and its load time).
//!
//! For each sweep point the same trace is replayed twice: once with the edge
//! cache bypassed (the baseline, which charges no lookup time) and once with
//! the cache enabled.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::descriptor::TaskKind;
use crate::netmodel::{
    latency_baseline, latency_hit, latency_miss, validate_compute, validate_sizes, ComputeSpec,
    LinkSpec, Links, SizeSpec,
};
use crate::simcache::CacheConfig;
use crate::tiers::{run_simulation, CloudBackend, Record, ServedFrom, SimConfig, SimError};
use crate::wire;
use crate::workload::{generate_trace, Trace, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("arms replayed different traces: {0}")]
    MismatchedTraces(String),
}

fn config_err(path: impl Into<String>, msg: impl ToString) -> HarnessError {
    HarnessError::Config {
        path: path.into(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulated,
    Networked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path to a numeric field, e.g. `link_EC.bandwidth_bps`.
    pub path: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub workload: WorkloadSpec,
    #[serde(rename = "link_ME")]
    pub link_me: LinkSpec,
    #[serde(rename = "link_EC")]
    pub link_ec: LinkSpec,
    pub compute: ComputeSpec,
    pub sizes: SizeSpec,
    pub cache: CacheConfig,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ScenarioConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err(e.path().to_string(), e.inner()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn links(&self) -> Links {
        Links {
            me: self.link_me,
            ec: self.link_ec,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.workload
            .validate()
            .map_err(|e| config_err("workload", e))?;
        self.link_me
            .validate()
            .map_err(|e| config_err("link_ME", e))?;
        self.link_ec
            .validate()
            .map_err(|e| config_err("link_EC", e))?;
        validate_compute(&self.compute).map_err(|e| config_err("compute", e))?;
        validate_sizes(&self.sizes).map_err(|e| config_err("sizes", e))?;
        self.cache.validate().map_err(|e| config_err("cache", e))?;

        // A recognition descriptor costs exactly its request frame on the link.
        let frame = wire::HEADER_LEN as u64 + 1 + 4 + 2 + 4 * self.workload.feature_dim as u64;
        let declared = self.sizes.object_recognition.request_descriptor_bytes;
        if declared != frame {
            return Err(config_err(
                "sizes.object_recognition.request_descriptor_bytes",
                format!(
                    "must equal the encoded request frame length {frame} for feature_dim {}, got {declared}",
                    self.workload.feature_dim
                ),
            ));
        }

        if let Some(first) = self.sweep.first() {
            let n = first.values.len();
            if n == 0 {
                return Err(config_err("sweep[0].values", "must not be empty"));
            }
            let base = serde_json::to_value(self).expect("config serializes");
            for (i, axis) in self.sweep.iter().enumerate() {
                if axis.values.len() != n {
                    return Err(config_err(
                        format!("sweep[{i}].values"),
                        format!(
                            "expected {n} values like sweep[0], got {}",
                            axis.values.len()
                        ),
                    ));
                }
                let field = pointer(&axis.path);
                match base.pointer(&field) {
                    Some(v) if v.is_number() => {}
                    Some(_) => {
                        return Err(config_err(
                            format!("sweep[{i}].path"),
                            format!("`{}` is not a numeric field", axis.path),
                        ))
                    }
                    None => {
                        return Err(config_err(
                            format!("sweep[{i}].path"),
                            format!("`{}` does not exist", axis.path),
                        ))
                    }
                }
                if axis.path.starts_with("sweep") {
                    return Err(config_err(
                        format!("sweep[{i}].path"),
                        "cannot sweep the sweep",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.sweep.first().map_or(1, |a| a.values.len())
    }

    /// The concrete configuration at sweep point `index` (sweep removed).
    pub fn point(&self, index: usize) -> Result<ScenarioConfig, HarnessError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (i, axis) in self.sweep.iter().enumerate() {
            let x = *axis.values.get(index).ok_or_else(|| {
                config_err(format!("sweep[{i}].values"), format!("no point {index}"))
            })?;
            let slot = value
                .pointer_mut(&pointer(&axis.path))
                .ok_or_else(|| config_err(format!("sweep[{i}].path"), "does not exist"))?;
            *slot = if slot.is_u64() {
                if x < 0.0 || x.fract() != 0.0 {
                    return Err(config_err(
                        axis.path.clone(),
                        format!("integer field cannot take {x}"),
                    ));
                }
                Value::from(x as u64)
            } else {
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .ok_or_else(|| config_err(axis.path.clone(), format!("{x} is not finite")))?
            };
        }
        if let Value::Object(map) = &mut value {
            map.remove("sweep");
        }
        let point: ScenarioConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| config_err(e.path().to_string(), e.inner()))?;
        point.validate()?;
        Ok(point)
    }

    pub fn point_label(&self, index: usize) -> String {
        self.sweep
            .iter()
            .map(|a| format!("{}={}", a.path, a.values[index]))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn backend(&self) -> CloudBackend {
        let catalog = if self.workload.kind_mix.object_recognition > 0.0 {
            self.workload.catalog_size
        } else {
            0
        };
        CloudBackend::new(self.compute, self.sizes, catalog, self.workload.feature_dim)
    }

    pub fn sim_config(&self, cache_enabled: bool) -> SimConfig {
        SimConfig {
            links: self.links(),
            compute: self.compute,
            sizes: self.sizes,
            cache: cache_enabled.then_some(self.cache),
        }
    }
}

fn pointer(dotted: &str) -> String {
    dotted.split('.').fold(String::new(), |mut acc, part| {
        acc.push('/');
        acc.push_str(part);
        acc
    })
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p / 100 * n)`. The 50th percentile of `[10, 20, 30, 40]` is 20.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_us(latencies: &[u64]) -> Self {
        if latencies.is_empty() {
            return Self::default();
        }
        let mut sorted = latencies.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&x| u128::from(x)).sum();
        LatencyStats {
            mean_ms: sum as f64 / sorted.len() as f64 / 1000.0,
            median_ms: nearest_rank(&sorted, 50.0).unwrap() as f64 / 1000.0,
            p95_ms: nearest_rank(&sorted, 95.0).unwrap() as f64 / 1000.0,
        }
    }
}

/// Aggregates for one task kind, or for all requests when `kind` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: Option<TaskKind>,
    pub requests: u64,
    pub edge_served: u64,
    pub hit_rate: f64,
    /// Fraction of edge-served responses that carried the correct object's
    /// result; 1 when nothing was served from the edge.
    pub precision: f64,
    pub baseline: LatencyStats,
    pub coic: LatencyStats,
    /// `1 - mean_coic / mean_baseline`.
    pub reduction: f64,
}

/// Per-kind and overall aggregates of a cache-enabled run against its
/// baseline. Both record sets must describe the same trace in the same order.
pub fn summarize(
    trace: &Trace,
    records: &[Record],
    baseline: &[Record],
    backend: &CloudBackend,
) -> Result<Vec<KindSummary>, HarnessError> {
    if records.len() != baseline.len() || records.len() != trace.len() {
        return Err(HarnessError::MismatchedTraces(format!(
            "{} trace entries, {} records, {} baseline records",
            trace.len(),
            records.len(),
            baseline.len()
        )));
    }
    for ((e, r), b) in trace.iter().zip(records).zip(baseline) {
        let q = &e.request;
        let same = |x: &Record| {
            x.request_id == q.request_id
                && x.user_id == q.user_id
                && x.kind == q.kind
                && x.issued_at == q.issued_at
        };
        if !same(r) || !same(b) {
            return Err(HarnessError::MismatchedTraces(format!(
                "request {} differs between arms",
                q.request_id
            )));
        }
    }

    let mut out = Vec::new();
    let groups = std::iter::once(None).chain(TaskKind::ALL.into_iter().map(Some));
    for kind in groups {
        let idx: Vec<usize> = (0..records.len())
            .filter(|&i| kind.is_none_or(|k| records[i].kind == k))
            .collect();
        if idx.is_empty() && kind.is_some() {
            continue;
        }
        let edge: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| records[i].served_from == ServedFrom::Edge)
            .collect();
        let correct = edge
            .iter()
            .filter(|&&i| {
                backend.is_correct_result(
                    records[i].kind,
                    trace.entries[i].object_id,
                    &records[i].result,
                )
            })
            .count();
        let lat = |rs: &[Record]| idx.iter().map(|&i| rs[i].latency_us).collect::<Vec<_>>();
        let coic = LatencyStats::from_us(&lat(records));
        let base = LatencyStats::from_us(&lat(baseline));
        let n = idx.len() as u64;
        out.push(KindSummary {
            kind,
            requests: n,
            edge_served: edge.len() as u64,
            hit_rate: if n == 0 {
                0.0
            } else {
                edge.len() as f64 / n as f64
            },
            precision: if edge.is_empty() {
                1.0
            } else {
                correct as f64 / edge.len() as f64
            },
            baseline: base,
            coic,
            reduction: if base.mean_ms > 0.0 {
                1.0 - coic.mean_ms / base.mean_ms
            } else {
                0.0
            },
        });
    }
    Ok(out)
}

/// Results for one sweep point.
#[derive(Debug, Clone)]
pub struct PointReport {
    pub index: usize,
    pub label: String,
    pub config: ScenarioConfig,
    pub trace: Trace,
    pub trace_digest: [u8; 32],
    pub baseline: Vec<Record>,
    pub coic: Vec<Record>,
    pub summaries: Vec<KindSummary>,
    /// Empty when every invariant check passed.
    pub violations: Vec<String>,
}

impl PointReport {
    pub fn overall(&self) -> &KindSummary {
        &self.summaries[0]
    }

    pub fn summary_for(&self, kind: TaskKind) -> Option<&KindSummary> {
        self.summaries.iter().find(|s| s.kind == Some(kind))
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub points: Vec<PointReport>,
}

impl RunReport {
    pub fn violations(&self) -> impl Iterator<Item = (usize, &str)> {
        self.points
            .iter()
            .flat_map(|p| p.violations.iter().map(move |v| (p.index, v.as_str())))
    }

    pub fn all_checks_passed(&self) -> bool {
        self.violations().next().is_none()
    }
}

/// Relative slack on the single-kind reduction bound, covering microsecond
/// rounding of measured latencies.
const BOUND_SLACK_US: f64 = 2.0;

fn check_invariants(
    config: &ScenarioConfig,
    trace: &Trace,
    coic: &crate::tiers::SimOutput,
    baseline: &crate::tiers::SimOutput,
    summaries: &[KindSummary],
) -> Vec<String> {
    let mut v = Vec::new();
    let links = config.links();
    if coic.records.len() != trace.len() || baseline.records.len() != trace.len() {
        v.push("conservation: record count differs from trace length".into());
    }
    let edge = coic
        .records
        .iter()
        .filter(|r| r.served_from == ServedFrom::Edge)
        .count() as u64;
    if let Some(stats) = coic.cache_stats {
        if stats.hits != edge {
            v.push(format!(
                "hit accounting: cache hits {} != edge-served {edge}",
                stats.hits
            ));
        }
        if stats.lookups != stats.hits + stats.misses {
            v.push("cache stats: lookups != hits + misses".into());
        }
        if stats.bytes_resident > config.cache.capacity_bytes {
            v.push("cache stats: resident bytes exceed capacity".into());
        }
    }
    for r in &coic.records {
        let expected = match r.served_from {
            ServedFrom::Edge => latency_hit(r.kind, &links, &config.compute, &config.sizes),
            ServedFrom::Cloud => latency_miss(r.kind, &links, &config.compute, &config.sizes),
        };
        if (r.latency_us as f64 - expected * 1000.0).abs() > 1.0 {
            v.push(format!(
                "oracle: request {} took {}us, closed form {:.3}us",
                r.request_id,
                r.latency_us,
                expected * 1000.0
            ));
        }
    }
    for r in &baseline.records {
        let expected = latency_baseline(r.kind, &links, &config.compute, &config.sizes);
        if r.served_from != ServedFrom::Cloud {
            v.push(format!(
                "baseline: request {} served from the edge",
                r.request_id
            ));
        }
        if (r.latency_us as f64 - expected * 1000.0).abs() > 1.0 {
            v.push(format!(
                "oracle: baseline request {} took {}us, closed form {:.3}us",
                r.request_id,
                r.latency_us,
                expected * 1000.0
            ));
        }
    }
    for s in summaries {
        if !(0.0..=1.0).contains(&s.hit_rate) || !(0.0..=1.0).contains(&s.precision) {
            v.push(format!(
                "range: hit_rate {} precision {}",
                s.hit_rate, s.precision
            ));
        }
    }
    // Reduction bound for single-kind scenarios.
    let kinds: Vec<&KindSummary> = summaries.iter().filter(|s| s.kind.is_some()).collect();
    if let [only] = kinds.as_slice() {
        let kind = only.kind.unwrap();
        let hit = latency_hit(kind, &links, &config.compute, &config.sizes);
        let miss = latency_miss(kind, &links, &config.compute, &config.sizes);
        let base = latency_baseline(kind, &links, &config.compute, &config.sizes);
        let bound = only.hit_rate * (1.0 - hit / miss);
        let eps = BOUND_SLACK_US / (base * 1000.0);
        if only.reduction > bound + eps {
            v.push(format!(
                "reduction {} exceeds hit_rate x (1 - L_hit/L_miss) = {bound}",
                only.reduction
            ));
        }
    }
    v
}

/// Generates the trace and runs both arms for one concrete configuration.
pub fn run_point(
    index: usize,
    label: String,
    config: ScenarioConfig,
) -> Result<PointReport, HarnessError> {
    if config.mode != Mode::Simulated {
        return Err(config_err(
            "mode",
            "`run` drives simulated scenarios; use serve-cloud, serve-edge and replay for networked mode",
        ));
    }
    let trace = generate_trace(&config.workload)?;
    let backend = config.backend();

    let digest_before = trace.digest();
    let baseline = run_simulation(&config.sim_config(false), &backend, &trace)?;
    let digest_baseline = trace.digest();
    let coic = run_simulation(&config.sim_config(true), &backend, &trace)?;
    if digest_baseline != digest_before || trace.digest() != digest_before {
        return Err(HarnessError::MismatchedTraces(
            "trace digest changed".into(),
        ));
    }

    let summaries = summarize(&trace, &coic.records, &baseline.records, &backend)?;
    let violations = check_invariants(&config, &trace, &coic, &baseline, &summaries);
    Ok(PointReport {
        index,
        label,
        config,
        trace,
        trace_digest: digest_before,
        baseline: baseline.records,
        coic: coic.records,
        summaries,
        violations,
    })
}

/// Runs every sweep point (in parallel; results keep sweep order) and, when
/// `out_dir` is given, writes the CSV reports there.
pub fn run_scenario(
    config: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let points: Vec<(usize, String, ScenarioConfig)> = (0..config.num_points())
        .map(|i| Ok((i, config.point_label(i), config.point(i)?)))
        .collect::<Result<_, HarnessError>>()?;

    let results: Vec<Result<PointReport, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .into_iter()
            .map(|(i, label, cfg)| s.spawn(move || run_point(i, label, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep point panicked"))
            .collect()
    });
    let report = RunReport {
        points: results.into_iter().collect::<Result<_, _>>()?,
    };
    if let Some(dir) = out_dir {
        write_reports(&report, dir)?;
    }
    Ok(report)
}

pub const REQUESTS_CSV_HEADER: &str =
    "arm,request_id,user_id,kind,object_id,issued_at_us,latency_us,served_from,matched_distance";

pub const SUMMARY_CSV_HEADER: &str = "point,label,kind,requests,edge_served,hit_rate,precision,\
baseline_mean_ms,baseline_median_ms,baseline_p95_ms,coic_mean_ms,coic_median_ms,coic_p95_ms,reduction";

pub fn requests_csv(point: &PointReport) -> String {
    let mut out = String::with_capacity(64 * (point.coic.len() + point.baseline.len() + 1));
    out.push_str(REQUESTS_CSV_HEADER);
    out.push('\n');
    for (arm, records) in [("baseline", &point.baseline), ("coic", &point.coic)] {
        for (r, e) in records.iter().zip(point.trace.iter()) {
            let dist = r
                .matched_distance
                .map(|d| format!("{d:.9}"))
                .unwrap_or_default();
            writeln!(
                out,
                "{arm},{},{},{},{},{},{},{},{dist}",
                r.request_id,
                r.user_id,
                r.kind,
                e.object_id,
                r.issued_at,
                r.latency_us,
                r.served_from
            )
            .unwrap();
        }
    }
    out
}

pub fn summary_csv(report: &RunReport) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for p in &report.points {
        for s in &p.summaries {
            let kind = s.kind.map_or("all", TaskKind::as_str);
            writeln!(
                out,
                "{},{},{kind},{},{},{:.9},{:.9},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9}",
                p.index,
                p.label,
                s.requests,
                s.edge_served,
                s.hit_rate,
                s.precision,
                s.baseline.mean_ms,
                s.baseline.median_ms,
                s.baseline.p95_ms,
                s.coic.mean_ms,
                s.coic.median_ms,
                s.coic.p95_ms,
                s.reduction
            )
            .unwrap();
        }
    }
    out
}

pub fn requests_csv_name(index: usize) -> String {
    format!("requests_p{index:02}.csv")
}

/// Writes `requests_pNN.csv` per sweep point and one `summary.csv`.
pub fn write_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for p in &report.points {
        let path = dir.join(requests_csv_name(p.index));
        fs::write(&path, requests_csv(p))?;
        written.push(path);
    }
    let path = dir.join("summary.csv");
    fs::write(&path, summary_csv(report))?;
    written.push(path);
    Ok(written)
}
