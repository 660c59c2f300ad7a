use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowcut_core::analytics::{ack_overhead_csv, memory_model_csv, ResourceModelInputs};
use flowcut_core::config::ExperimentConfig;
use flowcut_core::experiment::{self, Axis};
use flowcut_core::routing::Policy;
use flowcut_core::topology::export_edge_list;
use flowcut_core::{ConfigError, Error};

#[derive(Parser)]
#[command(name = "flowcut", version, about = "Packet-level simulator for flowcut switching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunOpts {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Seed to run; repeat for several. Overrides `seeds` in the config.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory. Defaults to `output` from the config, then `flowcut-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record a per-hop trace and check path invariants at the end of each run.
    #[arg(long)]
    trace: bool,
    /// Simulations to run in parallel (default: available processors).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment.
    Run(RunOpts),
    /// Run the Cartesian product of parameter axes.
    Sweep {
        #[command(flatten)]
        opts: RunOpts,
        /// `dotted.key=v1,v2,...`; repeat for more dimensions.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Print analytic model tables as CSV.
    Model {
        #[command(subcommand)]
        model: Model,
    },
    /// Write the built topology as an edge list.
    ExportTopology {
        config: PathBuf,
        /// Seed for failure injection.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Model {
    /// Table memory versus flows per host and latency.
    Memory {
        /// Take hosts, bandwidth, MTU and policy from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        hosts: usize,
        #[arg(long, default_value_t = 200.0)]
        bandwidth_gbps: f64,
        #[arg(long, default_value_t = 2048)]
        mtu: u32,
        #[arg(long, default_value_t = 11)]
        per_flow_bytes: u32,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6])]
        flows: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 50.0])]
        latency_us: Vec<f64>,
    },
    /// ACK bytes per data byte versus MTU.
    AckOverhead {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096, 9000])]
        mtu: Vec<u32>,
    },
}

fn load(opts: &RunOpts) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if !opts.seeds.is_empty() {
        cfg.seeds = opts.seeds.clone();
    }
    if opts.trace {
        cfg.trace = true;
    }
    let out = opts.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("flowcut-out"));
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Print to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), Error> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run(opts) => {
            let (cfg, out) = load(&opts)?;
            let runs = experiment::run(&cfg, opts.jobs)?;
            experiment::write_runs(&cfg, &runs, &out)?;
            for r in &runs {
                let a = &r.report.aggregates;
                emit(&format!(
                    "seed {}: {} flows, avg FCT {:.1} us, p99 FCT {:.1} us, OOO {:.4}, drains {}\n",
                    r.seed,
                    a.flows,
                    a.avg_fct_ns / 1e3,
                    a.p99_fct_ns / 1e3,
                    a.ooo_fraction,
                    a.drains
                ))?;
            }
            emit(&format!("results in {}\n", out.display()))?;
        }
        Command::Sweep { opts, axes } => {
            let (cfg, out) = load(&opts)?;
            let axes = axes.iter().map(|a| Axis::parse(a)).collect::<Result<Vec<_>, ConfigError>>()?;
            let result = experiment::sweep(&cfg, &axes, opts.jobs)?;
            let path = out.join("sweep.csv");
            write(&path, &result.csv())?;
            emit(&format!("{} runs, results in {}\n", result.rows.len(), path.display()))?;
        }
        Command::Model { model } => match model {
            Model::Memory { config, hosts, bandwidth_gbps, mtu, per_flow_bytes, flows, latency_us } => {
                let mut base = ResourceModelInputs {
                    hosts: hosts as f64,
                    flows_per_host: 1.0,
                    bandwidth_bps: bandwidth_gbps * 1e9,
                    latency_s: 0.0,
                    mtu_bytes: mtu as f64,
                    per_flow_bytes: per_flow_bytes as f64,
                };
                if let Some(path) = config {
                    let cfg = ExperimentConfig::load(&path)?;
                    let topo = cfg.build_topology(cfg.seeds[0])?;
                    base.hosts = topo.n_hosts as f64;
                    base.bandwidth_bps = cfg.link_params().bandwidth_bps as f64;
                    base.mtu_bytes = cfg.network.mtu as f64;
                    let policy = cfg.routing.policy;
                    base.per_flow_bytes = policy.per_flow_bytes().or(Policy::Flowcut.per_flow_bytes()).unwrap() as f64;
                }
                emit(&memory_model_csv(&base, &flows, &latency_us))?;
            }
            Model::AckOverhead { mtu } => {
                if mtu.contains(&0) {
                    return Err(ConfigError::Invalid("mtu must be positive".into()).into());
                }
                emit(&ack_overhead_csv(&mtu))?;
            }
        },
        Command::ExportTopology { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let text = export_edge_list(&cfg.build_topology(seed)?);
            match out {
                Some(p) => write(&p, &text)?,
                None => emit(&text)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
