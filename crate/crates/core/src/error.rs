use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::time::SimTime;

/// Problems with an experiment definition. Always detected before a run starts.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("workload: {0}")]
    Workload(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("failure plan: {0}")]
    Failures(String),
    #[error("malformed CDF `{name}` line {line}: {reason}")]
    Cdf { name: String, line: usize, reason: String },
    #[error("unknown flow-size distribution `{0}` (not bundled and no such file)")]
    UnknownDistribution(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("sweep axis `{axis}`: {reason}")]
    Axis { axis: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// Failures that abort a running simulation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but simulated time is already {now}")]
    ScheduledInPast { now: SimTime, at: SimTime },
    #[error("deadlock at {time}: {incomplete} flow(s) incomplete with an empty event queue; {diagnostic}")]
    Deadlock { time: SimTime, incomplete: usize, diagnostic: String },
    #[error("invariant violated at {time}: {what}")]
    Invariant { time: SimTime, what: String },
    #[error("hop count {0} exceeds the 4-bit wire field")]
    HopCountOverflow(u32),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for this error: 1 for configuration and I/O
    /// problems, 2 for deadlocks and invariant failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } => 1,
            Error::Sim(_) => 2,
        }
    }
}
