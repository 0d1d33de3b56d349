use std::fmt::Write as _;
use std::fs;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use coic_core::harness::{run_scenario, write_reports, RunReport, ScenarioConfig};
use coic_core::simcache::{SharedCache, SimilarityCache};
use coic_core::tiers::net::{self, CloudOptions, DEFAULT_CLOUD_PORT, DEFAULT_EDGE_PORT};
use coic_core::workload::{generate_trace, Trace};

#[derive(Parser)]
#[command(name = "coic", version, about = "Cooperative edge caching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated scenario (baseline and cached arms) and write CSV reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `workload.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the scenario's request trace in text form.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an edge node that caches results and forwards misses to the cloud.
    ServeEdge {
        #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_EDGE_PORT)))]
        listen: SocketAddr,
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_CLOUD_PORT}"))]
        cloud: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a cloud node that computes deterministic stub results.
    ServeCloud {
        #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_CLOUD_PORT)))]
        listen: SocketAddr,
        #[arg(long)]
        config: PathBuf,
        /// Answer immediately instead of sleeping for the configured compute time.
        #[arg(long)]
        no_compute_delay: bool,
    },
    /// Send a trace to an edge node in order and record what came back.
    Replay {
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_EDGE_PORT}"))]
        edge: String,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut config = ScenarioConfig::load(path)?;
    if let Some(seed) = seed {
        config.workload.seed = seed;
    }
    Ok(config)
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .with_context(|| format!("{addr} resolved to no address"))
}

fn print_report(report: &RunReport) {
    for p in &report.points {
        let label = if p.label.is_empty() { "-" } else { &p.label };
        println!("point {} [{label}]", p.index);
        for s in &p.summaries {
            let kind = s.kind.map_or("all", |k| k.as_str());
            println!(
                "  {kind:<20} n={:<6} hit_rate={:.4} precision={:.4} baseline={:.3}ms coic={:.3}ms reduction={:.2}%",
                s.requests,
                s.hit_rate,
                s.precision,
                s.baseline.mean_ms,
                s.coic.mean_ms,
                s.reduction * 100.0
            );
        }
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path) -> Result<bool> {
    let config = load_config(config, seed)?;
    let report = run_scenario(&config, None)?;
    let files = write_reports(&report, out)?;
    print_report(&report);
    for f in &files {
        info!("wrote {}", f.display());
    }
    let mut ok = true;
    for (point, v) in report.violations() {
        eprintln!("invariant violated at point {point}: {v}");
        ok = false;
    }
    Ok(ok)
}

fn cmd_gen_trace(config: &Path, seed: Option<u64>, out: &Path) -> Result<bool> {
    let config = load_config(config, seed)?;
    let trace = generate_trace(&config.workload)?;
    fs::write(out, trace.to_text()).with_context(|| format!("writing {}", out.display()))?;
    info!("{} requests written to {}", trace.len(), out.display());
    Ok(true)
}

fn cmd_serve_edge(listen: SocketAddr, cloud: &str, config: &Path) -> Result<bool> {
    let config = load_config(config, None)?;
    let cloud = resolve(cloud)?;
    let cache = SharedCache::new(SimilarityCache::new(config.cache)?);
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let handle = net::spawn_edge(listener, cloud, cache)?;
    info!(
        "edge listening on {}, cloud at {cloud}",
        handle.local_addr()
    );
    handle.join();
    Ok(true)
}

fn cmd_serve_cloud(listen: SocketAddr, config: &Path, no_delay: bool) -> Result<bool> {
    let config = load_config(config, None)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let options = CloudOptions {
        emulate_compute: !no_delay,
    };
    let handle = net::spawn_cloud(listener, Arc::new(config.backend()), options)?;
    info!("cloud listening on {}", handle.local_addr());
    handle.join();
    Ok(true)
}

const REPLAY_CSV_HEADER: &str =
    "request_id,user_id,kind,object_id,issued_at_us,latency_us,served_from";

fn cmd_replay(edge: &str, trace: &Path, out: &Path) -> Result<bool> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let trace = Trace::parse(&text)?;
    let records = net::replay(resolve(edge)?, &trace)?;
    if records.len() != trace.len() {
        bail!("{} of {} requests answered", records.len(), trace.len());
    }
    let mut csv = String::from(REPLAY_CSV_HEADER);
    csv.push('\n');
    let mut edge_served = 0usize;
    for r in &records {
        edge_served += usize::from(r.served_from == coic_core::ServedFrom::Edge);
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.request_id, r.user_id, r.kind, r.object_id, r.issued_at, r.latency_us, r.served_from
        )?;
    }
    fs::create_dir_all(out)?;
    let path = out.join("replay.csv");
    fs::write(&path, csv)?;
    println!(
        "replayed {} requests, {} served from the edge; wrote {}",
        records.len(),
        edge_served,
        path.display()
    );
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, seed, out } => cmd_run(config, *seed, out),
        Command::GenTrace { config, seed, out } => cmd_gen_trace(config, *seed, out),
        Command::ServeEdge {
            listen,
            cloud,
            config,
        } => cmd_serve_edge(*listen, cloud, config),
        Command::ServeCloud {
            listen,
            config,
            no_compute_delay,
        } => cmd_serve_cloud(*listen, config, *no_compute_delay),
        Command::Replay { edge, trace, out } => cmd_replay(edge, trace, out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            warn!("finished with invariant violations");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
