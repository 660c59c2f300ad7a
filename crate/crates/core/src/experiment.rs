//! Running configured experiments: one simulation per seed, and parameter
//! sweeps over the Cartesian product of axis values.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::analytics::{active_flows, memory_occupancy, ResourceModelInputs};
use crate::config::{parse_value, ExperimentConfig};
use crate::error::{ConfigError, Error};
use crate::metrics::RunReport;
use crate::topology::Topology;
use crate::trace::format_trace;

/// Result of one seed.
pub struct SeedRun {
    pub seed: u64,
    pub report: RunReport,
    /// Formatted per-hop trace, if tracing was on.
    pub trace: Option<String>,
    pub topology: Topology,
}

/// Simulate one seed of a validated config.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, Error> {
    let out = cfg.prepare(seed)?.run()?;
    let mut report = out.report;
    report.config_digest = cfg.digest();
    report.seed = seed;
    let trace = out.trace.map(|t| format_trace(&out.topology, &t));
    Ok(SeedRun { seed, report, trace, topology: out.topology })
}

fn pool(jobs: Option<usize>) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    b.build().expect("thread pool")
}

/// All seeds of `cfg`, `jobs` at a time (default: one per processor).
/// Results are in seed order; the first failing seed's error is returned.
pub fn run(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<SeedRun>, Error> {
    cfg.validate()?;
    let results: Vec<_> = pool(jobs).install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
    results.into_iter().collect()
}

/// Write `seed-<n>/{flows.csv,summary.json[,trace.txt]}` and the effective
/// `config.toml` under `dir`.
pub fn write_runs(cfg: &ExperimentConfig, runs: &[SeedRun], dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let conf = dir.join("config.toml");
    std::fs::write(&conf, cfg.to_toml_string()).map_err(|e| Error::io(&conf, e))?;
    for r in runs {
        let d = dir.join(format!("seed-{}", r.seed));
        r.report.write(&d)?;
        if let Some(t) = &r.trace {
            let p = d.join("trace.txt");
            std::fs::write(&p, t).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Analytic model inputs matching a finished run: the measured largest
/// ingress RTT as latency and the largest per-host flow concurrency.
pub fn model_inputs(cfg: &ExperimentConfig, report: &RunReport, hosts: usize) -> ResourceModelInputs {
    ResourceModelInputs {
        hosts: hosts as f64,
        flows_per_host: report.counters.max_concurrent_flows_per_host.max(1) as f64,
        bandwidth_bps: cfg.link_params().bandwidth_bps as f64,
        latency_s: report.counters.max_ingress_rtt_ns * 1e-9,
        mtu_bytes: cfg.network.mtu as f64,
        per_flow_bytes: cfg.routing.policy.per_flow_bytes().unwrap_or(0) as f64,
    }
}

/// Model bound for a run: `(measured entries, analytic active flows,
/// analytic bytes)`.
pub fn occupancy_vs_model(cfg: &ExperimentConfig, run: &SeedRun) -> (usize, f64, f64) {
    let i = model_inputs(cfg, &run.report, run.topology.n_hosts);
    (run.report.counters.max_table_occupancy, active_flows(&i), memory_occupancy(&i))
}

/// One sweep dimension: a dotted config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub path: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parse `name=v1,v2,...`.
    pub fn parse(s: &str) -> Result<Axis, ConfigError> {
        let (path, vals) = s.split_once('=').ok_or_else(|| ConfigError::Axis {
            axis: s.to_string(),
            reason: "expected name=v1,v2,...".into(),
        })?;
        let path = path.trim().to_string();
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if path.is_empty() || values.is_empty() {
            return Err(ConfigError::Axis { axis: s.to_string(), reason: "empty name or value list".into() });
        }
        Ok(Axis { path, values })
    }
}

pub struct SweepRow {
    /// Axis values in axis order, as written on the command line.
    pub values: Vec<String>,
    pub seed: u64,
    pub report: RunReport,
}

pub struct SweepResult {
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_METRICS: &str =
    "seed,flows,avg_fct_ns,p99_fct_ns,max_fct_ns,ooo_fraction,max_ood,draining_impact,drains,max_table_occupancy,config_digest";

impl SweepResult {
    /// One row per grid cell and seed.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        for a in &self.axes {
            out.push_str(a);
            out.push(',');
        }
        out.push_str(SWEEP_CSV_METRICS);
        out.push('\n');
        for r in &self.rows {
            for v in &r.values {
                out.push_str(v);
                out.push(',');
            }
            let a = &r.report.aggregates;
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.6},{},{:.6},{},{},{}",
                r.seed,
                a.flows,
                a.avg_fct_ns,
                a.p99_fct_ns,
                a.max_fct_ns,
                a.ooo_fraction,
                a.max_ood,
                a.draining_impact,
                a.drains,
                r.report.counters.max_table_occupancy,
                r.report.config_digest
            );
        }
        out
    }

    /// Mean over seeds of the average FCT of the cell with these values.
    pub fn cell_avg_fct_ns(&self, values: &[&str]) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.values.iter().map(String::as_str).eq(values.iter().copied()))
            .map(|r| r.report.aggregates.avg_fct_ns)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Run every combination of axis values for every seed. All cell configs
/// are validated before the first simulation starts.
pub fn sweep(cfg: &ExperimentConfig, axes: &[Axis], jobs: Option<usize>) -> Result<SweepResult, Error> {
    let mut cells: Vec<(Vec<String>, ExperimentConfig)> = vec![(Vec::new(), cfg.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for (vals, c) in &cells {
            for v in &axis.values {
                let c2 = c.with_value(&axis.path, parse_value(v))?;
                let mut vals2 = vals.clone();
                vals2.push(v.clone());
                next.push((vals2, c2));
            }
        }
        cells = next;
    }
    let jobs_list: Vec<(&Vec<String>, &ExperimentConfig, u64)> =
        cells.iter().flat_map(|(v, c)| c.seeds.iter().map(move |&s| (v, c, s))).collect();
    let results: Vec<Result<SweepRow, Error>> = pool(jobs).install(|| {
        jobs_list
            .par_iter()
            .map(|&(v, c, s)| run_seed(c, s).map(|r| SweepRow { values: v.clone(), seed: s, report: r.report }))
            .collect()
    });
    Ok(SweepResult { axes: axes.iter().map(|a| a.path.clone()).collect(), rows: results.into_iter().collect::<Result<_, _>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let a = Axis::parse("routing.alpha=0.25, 0.5").unwrap();
        assert_eq!(a.path, "routing.alpha");
        assert_eq!(a.values, vec!["0.25", "0.5"]);
        assert!(Axis::parse("routing.alpha").is_err());
        assert!(Axis::parse("routing.alpha=").is_err());
    }
}
