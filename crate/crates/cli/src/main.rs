//! Experiment runner: single runs, load sweeps, mechanism comparisons,
//! synthetic trace generation, and standalone deadlock-freedom checks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error,
//! 4 requested mechanism unavailable on this configuration.

use clap::{Parser, Subcommand};
use netsim::config::{Mechanism, RoutingAlgorithm, SimConfig, TopologyKindCfg};
use netsim::engine::{replication_seed, run_config, sweep_load};
use netsim::metrics::MetricsRecord;
use netsim::routing::{check_deadlock_free, compute_up_down, diff_tables, dimension_order_torus};
use netsim::topology::Topology;
use netsim::traffic::{generate_workload, write_trace, WorkloadProfile, ALL_PROFILES};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_UNAVAILABLE: u8 = 4;

#[derive(Parser)]
#[command(name = "netsim", about = "Deterministic wormhole network simulator with dynamic reconfiguration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one simulation and write metrics.json, messages.csv,
    /// series.csv and report.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Write the per-movement flit trace next to the metrics.
        #[arg(long)]
        flit_trace: bool,
    },
    /// One independent run per injection rate; emits a latency-vs-load CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated injection rates (messages/node/cycle).
        #[arg(long)]
        rates: String,
        /// Seed replications per rate.
        #[arg(long, default_value_t = 1)]
        replications: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several mechanisms on an otherwise identical configuration and
    /// tabulate results normalized to the first successful mechanism.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated mechanisms, e.g. dbr,ds,sr.
        #[arg(long, default_value = "dbr,ds,sr")]
        mechanisms: String,
        #[arg(long, default_value_t = 1)]
        replications: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Emit a synthetic workload trace in the documented text format.
    TraceGen {
        /// Workload profile name (fft, lu, barnes, radix, water-nsq, water-spa).
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 7)]
        rows: usize,
        #[arg(long, default_value_t = 7)]
        cols: usize,
        #[arg(long, default_value_t = 20_000)]
        horizon: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute routing tables for a configuration and verify
    /// deadlock freedom of the channel-dependency graph.
    CheckTables {
        #[arg(long)]
        config: PathBuf,
        /// Also check the union of the pre-fault and post-fault tables
        /// (the reconfiguration transition hazard).
        #[arg(long)]
        union_after_fault: bool,
        /// Export the table as text (one line per node/destination/ports).
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_config(path: &Path) -> Result<SimConfig, ExitCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_CONFIG, &format!("cannot read {}: {e}", path.display())))?;
    let cfg: SimConfig = toml::from_str(&text)
        .map_err(|e| fail(EXIT_CONFIG, &format!("cannot parse {}: {e}", path.display())))?;
    if let Err(violations) = cfg.validate() {
        let unavailable = violations.iter().any(|v| v.contains("requires two sets"));
        for v in &violations {
            eprintln!("config: {v}");
        }
        return Err(ExitCode::from(if unavailable { EXIT_UNAVAILABLE } else { EXIT_CONFIG }));
    }
    Ok(cfg)
}

fn write_outputs(dir: &Path, rec: &MetricsRecord) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), rec.to_json())?;
    std::fs::write(dir.join("messages.csv"), rec.messages_csv())?;
    std::fs::write(dir.join("series.csv"), rec.series_csv())?;
    std::fs::write(dir.join("report.txt"), rec.report_text())?;
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, out, flit_trace } => cmd_run(&config, seed, &out, flit_trace),
        Cmd::Sweep { config, rates, replications, out } => {
            cmd_sweep(&config, &rates, replications, &out)
        }
        Cmd::Compare { config, mechanisms, replications, seed, out } => {
            cmd_compare(&config, &mechanisms, replications, seed, &out)
        }
        Cmd::TraceGen { profile, rows, cols, horizon, seed, out } => {
            cmd_trace_gen(&profile, rows, cols, horizon, seed, &out)
        }
        Cmd::CheckTables { config, union_after_fault, export } => {
            cmd_check_tables(&config, union_after_fault, export.as_deref())
        }
    }
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, flit_trace: bool) -> ExitCode {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.flit_trace = flit_trace;
    let mut engine = match netsim::engine::Engine::new(cfg.clone()) {
        Ok(e) => e,
        Err(errors) => return fail(EXIT_RUNTIME, &errors.join("; ")),
    };
    let horizon = cfg.horizon + cfg.drain_limit;
    while engine.now() < cfg.horizon {
        engine.step();
    }
    while cfg.drain_limit > 0 && engine.now() < horizon {
        engine.step();
    }
    let trace = engine.take_flit_log();
    let rec = engine.finish();
    if let Err(e) = write_outputs(out, &rec) {
        return fail(EXIT_RUNTIME, &format!("writing outputs: {e}"));
    }
    if let Some(t) = trace {
        if std::fs::write(out.join("flit_trace.txt"), t).is_err() {
            return fail(EXIT_RUNTIME, "writing flit trace");
        }
    }
    println!("{}", rec.report_text());
    ExitCode::SUCCESS
}

fn cmd_sweep(config: &Path, rates: &str, replications: u64, out: &Path) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let rates: Vec<f64> = match rates.split(',').map(|r| r.trim().parse::<f64>()).collect() {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, &format!("bad --rates: {e}")),
    };
    if std::fs::create_dir_all(out).is_err() {
        return fail(EXIT_RUNTIME, "creating output directory");
    }
    let mut summary = String::from(
        "rate,replication,seed,mean_latency,p95_latency,accepted_flits_per_node_cycle,saturated,teardowns,dropped\n",
    );
    for rep in 0..replications {
        let mut base = cfg.clone();
        base.seed = replication_seed(cfg.seed, rep);
        let records = match sweep_load(&base, &rates) {
            Ok(r) => r,
            Err(errors) => return fail(EXIT_RUNTIME, &errors.join("; ")),
        };
        for (rate, rec) in rates.iter().zip(&records) {
            summary.push_str(&format!(
                "{rate},{rep},{},{},{},{},{},{},{}\n",
                rec.seed,
                rec.mean_latency,
                rec.p95_latency,
                rec.accepted_flits_per_node_cycle,
                rec.saturated,
                rec.teardowns,
                rec.dropped
            ));
            let name = format!("metrics-r{rate}-s{rep}.json");
            if std::fs::write(out.join(name), rec.to_json()).is_err() {
                return fail(EXIT_RUNTIME, "writing sweep outputs");
            }
        }
    }
    if std::fs::write(out.join("sweep.csv"), &summary).is_err() {
        return fail(EXIT_RUNTIME, "writing sweep.csv");
    }
    print!("{summary}");
    ExitCode::SUCCESS
}

fn cmd_compare(
    config: &Path,
    mechanisms: &str,
    replications: u64,
    seed: Option<u64>,
    out: &Path,
) -> ExitCode {
    let base = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let mut mechs = Vec::new();
    for name in mechanisms.split(',') {
        match Mechanism::parse(name.trim()) {
            Some(m) => mechs.push(m),
            None => return fail(EXIT_CONFIG, &format!("unknown mechanism `{name}` (expected dbr, ds or sr)")),
        }
    }
    if mechs.len() < 2 {
        return fail(EXIT_CONFIG, "compare needs at least two mechanisms");
    }
    if std::fs::create_dir_all(out).is_err() {
        return fail(EXIT_RUNTIME, "creating output directory");
    }
    struct Row {
        mech: Mechanism,
        latency: f64,
        p95: f64,
        accepted: f64,
        energy: f64,
        teardowns: u64,
        dropped: u64,
        undeliverable: u64,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    for mech in mechs {
        let mut cfg = base.clone();
        cfg.mechanism = mech;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Err(v) = cfg.validate() {
            errors.push(format!("{}: {}", mech.name(), v.join("; ")));
            continue;
        }
        let mut lat = 0.0;
        let mut p95 = 0.0;
        let mut acc = 0.0;
        let mut energy = 0.0;
        let mut teard = 0u64;
        let mut dropped = 0u64;
        let mut undeliv = 0u64;
        let mut failed = None;
        for rep in 0..replications {
            let mut c = cfg.clone();
            c.seed = replication_seed(cfg.seed, rep);
            match run_config(c) {
                Ok(rec) => {
                    lat += rec.mean_latency / replications as f64;
                    p95 += rec.p95_latency as f64 / replications as f64;
                    acc += rec.accepted_flits_per_node_cycle / replications as f64;
                    energy += rec.energy.total / replications as f64;
                    teard += rec.teardowns;
                    dropped += rec.dropped;
                    undeliv += rec.undeliverable;
                    let name = format!("metrics-{}-s{rep}.json", rec.config.mechanism.name());
                    let _ = std::fs::write(out.join(name), rec.to_json());
                }
                Err(e) => {
                    failed = Some(e.join("; "));
                    break;
                }
            }
        }
        match failed {
            Some(e) => errors.push(format!("{}: {e}", mech.name())),
            None => rows.push(Row {
                mech,
                latency: lat,
                p95,
                accepted: acc,
                energy,
                teardowns: teard,
                dropped,
                undeliverable: undeliv,
            }),
        }
    }
    if rows.is_empty() {
        return fail(EXIT_UNAVAILABLE, &format!("no mechanism could run: {}", errors.join(" | ")));
    }
    let baseline = rows.iter().find(|r| r.mech == Mechanism::Dbr).unwrap_or(&rows[0]);
    let (bl, be) = (baseline.latency, baseline.energy);
    let mut table = String::from(
        "mechanism,mean_latency,p95_latency,accepted,energy,teardowns,dropped,undeliverable,latency_vs_dbr,energy_vs_dbr\n",
    );
    let mut report = format!(
        "{:<10} {:>12} {:>10} {:>12} {:>14} {:>10} {:>8} {:>8} {:>8}\n",
        "mechanism", "latency", "p95", "accepted", "energy", "teardowns", "dropped", "undeliv", "vs-dbr"
    );
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mech.name(),
            r.latency,
            r.p95,
            r.accepted,
            r.energy,
            r.teardowns,
            r.dropped,
            r.undeliverable,
            r.latency / bl,
            r.energy / be
        ));
        report.push_str(&format!(
            "{:<10} {:>12.2} {:>10.1} {:>12.6} {:>14.1} {:>10} {:>8} {:>8} {:>8.3}\n",
            r.mech.name(),
            r.latency,
            r.p95,
            r.accepted,
            r.energy,
            r.teardowns,
            r.dropped,
            r.undeliverable,
            r.latency / bl
        ));
    }
    for e in &errors {
        report.push_str(&format!("unavailable: {e}\n"));
    }
    if std::fs::write(out.join("comparison.csv"), &table).is_err()
        || std::fs::write(out.join("report.txt"), &report).is_err()
    {
        return fail(EXIT_RUNTIME, "writing comparison outputs");
    }
    print!("{report}");
    ExitCode::SUCCESS
}

fn cmd_trace_gen(profile: &str, rows: usize, cols: usize, horizon: u64, seed: u64, out: &Path) -> ExitCode {
    let Some(p) = WorkloadProfile::parse(profile) else {
        let names: Vec<&str> = ALL_PROFILES.iter().map(|p| p.name()).collect();
        return fail(
            EXIT_CONFIG,
            &format!("unknown profile `{profile}`; available: {}", names.join(", ")),
        );
    };
    let records = generate_workload(p, rows, cols, horizon, seed);
    let header = format!(
        "{}\ngrid {rows}x{cols}, horizon {horizon} cycles, seed {seed}\nformat: injection_cycle src dst size_flits",
        p.describe()
    );
    let text = write_trace(&records, &header);
    if let Some(parent) = out.parent() {
        let _ = std::fs::create_dir_all(parent);
    }
    if std::fs::write(out, text).is_err() {
        return fail(EXIT_RUNTIME, "writing trace file");
    }
    println!("wrote {} records to {}", records.len(), out.display());
    ExitCode::SUCCESS
}

fn cmd_check_tables(config: &Path, union_after_fault: bool, export: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let t = &cfg.topology;
    let topo = match t.kind {
        TopologyKindCfg::Torus => Topology::build_torus(t.rows, t.cols, t.vcs_per_channel, t.buffer_depth),
        TopologyKindCfg::Mesh => Topology::build_mesh(t.rows, t.cols, t.vcs_per_channel, t.buffer_depth),
    };
    let topo = match topo {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, &format!("topology: {e}")),
    };
    let old = match cfg.routing {
        RoutingAlgorithm::UpDown => match compute_up_down(&topo, 0, 0) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_RUNTIME, &format!("routing: {e}")),
        },
        RoutingAlgorithm::DimensionOrder => dimension_order_torus(&topo),
    };
    if let Some(path) = export {
        if std::fs::write(path, old.export_text()).is_err() {
            return fail(EXIT_RUNTIME, "writing table export");
        }
    }
    let single = check_deadlock_free(&[&old], &topo, 0);
    println!(
        "single routing function: {}",
        if single.deadlock_free { "deadlock-free (acyclic dependency graph)".into() } else {
            format!("NOT deadlock-free; witness cycle: {:?}", single.witness.unwrap())
        }
    );
    if union_after_fault {
        let Some(fault) = cfg.faults.first() else {
            return fail(EXIT_CONFIG, "--union-after-fault needs a fault in the config");
        };
        let mut faulted = topo.clone();
        if let Err(e) = faulted.apply_fault(netsim::topology::FaultEvent { element: fault.element, cycle: 0 }) {
            return fail(EXIT_CONFIG, &format!("fault: {e}"));
        }
        let root = (0..faulted.node_count()).find(|&x| faulted.node_usable(x, 1)).unwrap();
        let new = match compute_up_down(&faulted, root, 1) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_RUNTIME, &format!("post-fault routing: {e}")),
        };
        let delta = diff_tables(&old, &new).expect("same node set");
        println!("table delta after fault: {} of {} entries", delta.len(), topo.node_count() * (topo.node_count() - 1));
        let union = check_deadlock_free(&[&old, &new], &faulted, 1);
        println!(
            "old/new union: {}",
            if union.deadlock_free { "deadlock-free".into() } else {
                format!(
                    "cyclic (transition hazard); witness of {} channels",
                    union.witness.unwrap().len()
                )
            }
        );
    }
    ExitCode::SUCCESS
}
