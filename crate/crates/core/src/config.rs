//! Experiment definitions in TOML.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [topology]
//! kind = "fat-tree"        # fat-tree | dragonfly | star
//! pods = 4
//! tors_per_pod = 4
//! hosts_per_tor = 4
//! taper = 1
//!
//! [routing]
//! policy = "flowcut"
//! rtt_ratio_threshold = 4.0
//!
//! [workload]
//! kind = "permutation"     # permutation | all-to-all | random-uniform
//! flow_size = 8388608
//! ```
//!
//! Every section except `[topology]` and `[workload]` may be omitted, and
//! every key has a default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigError, Error};
use crate::packet::mix64;
use crate::routing::{FlowletPreset, Policy};
use crate::sim::{Network, ResumeTimeout, SimParams};
use crate::switch::CongestionParams;
use crate::time::SimTime;
use crate::topology::{DragonflyParams, FailurePlan, FatTreeParams, LinkParams, Topology, TopologySpec};
use crate::workload::{
    generate_all_to_all, generate_permutation, generate_random_uniform, FlowSpec, SizeDistribution,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Where `run` and `sweep` write results unless `--out` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub trace: bool,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub failures: FailureConfig,
    #[serde(default)]
    pub network: NetworkConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    FatTree,
    Dragonfly,
    Star,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub pods: usize,
    pub tors_per_pod: usize,
    pub hosts_per_tor: usize,
    pub taper: usize,
    pub groups: usize,
    pub switches_per_group: usize,
    pub hosts_per_switch: usize,
    pub global_links_per_group_pair: usize,
    pub radix: usize,
    /// Star only.
    pub hosts: usize,
    pub bandwidth_gbps: f64,
    pub latency_ns: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            kind: TopologyKind::FatTree,
            pods: 4,
            tors_per_pod: 4,
            hosts_per_tor: 4,
            taper: 1,
            groups: 4,
            switches_per_group: 4,
            hosts_per_switch: 4,
            global_links_per_group_pair: 2,
            radix: DragonflyParams::DEFAULT_RADIX,
            hosts: 2,
            bandwidth_gbps: 200.0,
            latency_ns: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub policy: Policy,
    pub alpha: f64,
    pub rtt_ratio_threshold: f64,
    pub rtt_growth_threshold: f64,
    pub flowlet_preset: FlowletPreset,
    /// Overrides the preset's timeout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flowlet_timeout_ns: Option<u64>,
    pub flowcell_bytes: u64,
    /// Enables partial resume with this receiver out-of-order bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_bound: Option<u32>,
    pub table_capacity: usize,
    /// Source-side resume timer. Absent: ten base RTTs; 0 disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume_timeout_ns: Option<u64>,
    pub xon_loss: f64,
    pub ack_loss: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        let c = CongestionParams::for_bandwidth(200_000_000_000);
        RoutingConfig {
            policy: Policy::Flowcut,
            alpha: c.alpha,
            rtt_ratio_threshold: c.rtt_ratio_threshold,
            rtt_growth_threshold: c.rtt_growth_threshold,
            flowlet_preset: FlowletPreset::Balanced,
            flowlet_timeout_ns: None,
            flowcell_bytes: 64 * 1024,
            ood_bound: None,
            table_capacity: 64 * 1024,
            resume_timeout_ns: None,
            xon_loss: 0.0,
            ack_loss: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Permutation,
    AllToAll,
    RandomUniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    /// Bytes per flow for permutation and all-to-all.
    pub flow_size: u64,
    /// Outstanding flows per source in all-to-all.
    pub window: usize,
    /// Bundled CDF name or a path to a CDF file (random-uniform).
    pub distribution: String,
    /// Inline CDF as `[[size, probability], ...]`; overrides `distribution`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cdf_points: Option<Vec<(u64, f64)>>,
    pub flows_per_host: usize,
    /// Never pair hosts behind the same switch. Defaults to on for fat
    /// trees, so that traffic crosses the aggregation layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avoid_same_switch: Option<bool>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            kind: WorkloadKind::Permutation,
            flow_size: 8 << 20,
            window: 4,
            distribution: "websearch".into(),
            cdf_points: None,
            flows_per_host: 8,
            avoid_same_switch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureConfig {
    /// Share of switch-to-switch cables to degrade.
    pub fraction: f64,
    /// Bandwidth divisor of degraded cables.
    pub degrade_factor: f64,
}

impl Default for FailureConfig {
    fn default() -> Self {
        FailureConfig { fraction: 0.0, degrade_factor: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Payload bytes per packet.
    pub mtu: u32,
    /// Per-port, per-virtual-channel input buffer.
    pub buffer_bytes: u32,
    pub timeline_bucket_ns: u64,
    /// Check conservation invariants after every event (slow).
    pub check_invariants: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { mtu: 2048, buffer_bytes: 64 * 1024, timeline_bucket_ns: 10_000, check_invariants: false }
    }
}

/// Seed stream for a purpose, so adding a consumer does not shift others.
fn derived_seed(seed: u64, purpose: u64) -> u64 {
    mix64(seed ^ mix64(purpose))
}

impl ExperimentConfig {
    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_toml_str(&text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, in hex.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_toml_string().as_bytes());
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Check everything a run needs, without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        let t = &self.topology;
        if !(t.bandwidth_gbps > 0.0 && t.bandwidth_gbps.is_finite()) {
            return Err(ConfigError::Topology(format!("bandwidth_gbps {} must be positive", t.bandwidth_gbps)));
        }
        if t.latency_ns == 0 {
            return Err(ConfigError::Topology("latency_ns must be positive".into()));
        }
        self.failure_plan(self.seeds[0]).validate()?;
        if self.workload.kind == WorkloadKind::RandomUniform && self.workload.flows_per_host == 0 {
            return Err(ConfigError::Workload("flows_per_host must be at least 1".into()));
        }
        self.size_distribution()?;
        let topo = self.build_topology(self.seeds[0])?;
        let flows = self.flows(&topo, self.seeds[0])?;
        Network::new(topo, flows, self.sim_params(self.seeds[0]))?;
        Ok(())
    }

    pub fn topology_spec(&self) -> TopologySpec {
        let t = &self.topology;
        match t.kind {
            TopologyKind::FatTree => TopologySpec::FatTree(FatTreeParams {
                pods: t.pods,
                tors_per_pod: t.tors_per_pod,
                hosts_per_tor: t.hosts_per_tor,
                taper: t.taper,
            }),
            TopologyKind::Dragonfly => TopologySpec::Dragonfly(DragonflyParams {
                groups: t.groups,
                switches_per_group: t.switches_per_group,
                hosts_per_switch: t.hosts_per_switch,
                global_links_per_group_pair: t.global_links_per_group_pair,
                radix: t.radix,
            }),
            TopologyKind::Star => TopologySpec::Star { hosts: t.hosts },
        }
    }

    pub fn link_params(&self) -> LinkParams {
        LinkParams {
            bandwidth_bps: (self.topology.bandwidth_gbps * 1e9).round() as u64,
            latency: SimTime::from_nanos(self.topology.latency_ns),
        }
    }

    pub fn failure_plan(&self, seed: u64) -> FailurePlan {
        FailurePlan {
            seed: derived_seed(seed, 1),
            fraction: self.failures.fraction,
            degrade_factor: self.failures.degrade_factor,
        }
    }

    /// Topology with this seed's failures applied.
    pub fn build_topology(&self, seed: u64) -> Result<Topology, ConfigError> {
        let mut t = Topology::build(&self.topology_spec(), self.link_params())?;
        t.inject_failures(&self.failure_plan(seed))?;
        Ok(t)
    }

    pub fn size_distribution(&self) -> Result<SizeDistribution, ConfigError> {
        match &self.workload.cdf_points {
            Some(points) => SizeDistribution::new("inline", points.clone()),
            None => SizeDistribution::load(&self.workload.distribution),
        }
    }

    pub fn flows(&self, topo: &Topology, seed: u64) -> Result<Vec<FlowSpec>, ConfigError> {
        let w = &self.workload;
        let n = topo.n_hosts;
        let class: Vec<usize> = topo.host_attach.iter().map(|&(sw, _)| sw).collect();
        let avoid = w.avoid_same_switch.unwrap_or(self.topology.kind == TopologyKind::FatTree);
        let class = avoid.then_some(&class[..]);
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, 2));
        match w.kind {
            WorkloadKind::Permutation => generate_permutation(n, w.flow_size, class, &mut rng),
            WorkloadKind::AllToAll => generate_all_to_all(n, w.flow_size, w.window),
            WorkloadKind::RandomUniform => {
                generate_random_uniform(n, &self.size_distribution()?, w.flows_per_host, class, &mut rng)
            }
        }
    }

    pub fn sim_params(&self, seed: u64) -> SimParams {
        let r = &self.routing;
        let bw = self.link_params().bandwidth_bps;
        let mut p = SimParams::new(r.policy, bw);
        p.congestion = CongestionParams {
            alpha: r.alpha,
            rtt_ratio_threshold: r.rtt_ratio_threshold,
            rtt_growth_threshold: r.rtt_growth_threshold,
            ..CongestionParams::for_bandwidth(bw)
        };
        p.flowlet_timeout = r.flowlet_timeout_ns.map(SimTime::from_nanos).unwrap_or(r.flowlet_preset.default_timeout());
        p.flowcell_bytes = r.flowcell_bytes;
        p.ood_bound = r.ood_bound;
        p.table_capacity = r.table_capacity;
        p.resume_timeout = match r.resume_timeout_ns {
            None => ResumeTimeout::Auto,
            Some(0) => ResumeTimeout::Disabled,
            Some(ns) => ResumeTimeout::After(SimTime::from_nanos(ns)),
        };
        p.xon_loss = r.xon_loss;
        p.ack_loss = r.ack_loss;
        p.mtu = self.network.mtu;
        p.buffer_bytes = self.network.buffer_bytes;
        p.timeline_bucket = SimTime::from_nanos(self.network.timeline_bucket_ns);
        p.check_invariants = self.network.check_invariants;
        p.trace = self.trace;
        p.seed = derived_seed(seed, 3);
        p
    }

    /// Everything needed for one run.
    pub fn prepare(&self, seed: u64) -> Result<Network, ConfigError> {
        let topo = self.build_topology(seed)?;
        let flows = self.flows(&topo, seed)?;
        Network::new(topo, flows, self.sim_params(seed))
    }

    /// Copy with the dotted key `path` (e.g. `routing.alpha`) set to `value`.
    pub fn with_value(&self, path: &str, value: toml::Value) -> Result<Self, ConfigError> {
        let axis_err = |reason: String| ConfigError::Axis { axis: path.to_string(), reason };
        let mut root = toml::Value::try_from(self).expect("config converts to a TOML value");
        let parts: Vec<&str> = path.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut table = root.as_table_mut().expect("config is a table");
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| axis_err(format!("no config section `{p}`")))?;
        }
        table.insert(last.to_string(), value);
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| axis_err(e.message().to_string()))?;
        cfg.validate().map_err(|e| axis_err(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parse an axis or CLI value as TOML (`4`, `0.5`, `"ecmp"`, `true`),
/// falling back to a bare string.
pub fn parse_value(s: &str) -> toml::Value {
    let s = s.trim();
    #[derive(Deserialize)]
    struct V {
        v: toml::Value,
    }
    toml::from_str::<V>(&format!("v = {s}")).map(|x| x.v).unwrap_or_else(|_| toml::Value::String(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [topology]
        kind = "star"
        hosts = 2

        [routing]
        policy = "ecmp"

        [workload]
        kind = "permutation"
        flow_size = 1024
    "#;

    #[test]
    fn minimal_parses() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(c.topology.kind, TopologyKind::Star);
        assert_eq!(c.routing.policy, Policy::Ecmp);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.routing.policy = Policy::Flowcut;
        c.routing.ood_bound = Some(3);
        c.workload.cdf_points = Some(vec![(100, 0.5), (200, 1.0)]);
        c.output = Some("out".into());
        let text = c.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("hosts = 2", "hosts = 2\nspeed = 9");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(ConfigError::Parse(_))));
        let bad = format!("colour = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn semantic_errors_are_reported() {
        let bad = MINIMAL.replace("hosts = 2", "hosts = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = MINIMAL.replace("\"ecmp\"", "\"ugal\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(ConfigError::Routing(_))));
        let bad = MINIMAL.replace("flow_size = 1024", "flow_size = 1024\n[failures]\nfraction = 2.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(ConfigError::Failures(_))));
    }

    #[test]
    fn axis_editing() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let d = c.with_value("routing.alpha", parse_value("0.25")).unwrap();
        assert_eq!(d.routing.alpha, 0.25);
        let d = c.with_value("routing.rtt_ratio_threshold", parse_value("3")).unwrap();
        assert_eq!(d.routing.rtt_ratio_threshold, 3.0);
        assert!(c.with_value("routing.alpha", parse_value("fast")).is_err());
        assert!(c.with_value("routing.ood_bound", parse_value("3")).is_err(), "partial resume needs flowcut");
        let f = c.with_value("routing.policy", parse_value("flowcut")).unwrap();
        let d = f.with_value("routing.ood_bound", parse_value("3")).unwrap();
        assert_eq!(d.routing.ood_bound, Some(3));
        assert!(c.with_value("routing.nope", parse_value("1")).is_err());
        assert!(c.with_value("nope.alpha", parse_value("1")).is_err());
        let d = c.with_value("routing.policy", parse_value("spray")).unwrap();
        assert_eq!(d.routing.policy, Policy::Spray);
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("4"), toml::Value::Integer(4));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("ecmp"), toml::Value::String("ecmp".into()));
        assert_eq!(parse_value("\"x y\""), toml::Value::String("x y".into()));
    }
}
