use flowcut_core::config::ExperimentConfig;
use flowcut_core::experiment::{self, Axis};
use flowcut_core::host::packet_count;
use flowcut_core::routing::Policy;
use flowcut_core::sim::{Network, SimParams};
use flowcut_core::time::serialization_time;
use flowcut_core::topology::{LinkParams, Topology, TopologySpec};
use flowcut_core::workload::{FlowSpec, FlowStart};
use flowcut_core::{ConfigError, SimTime};
use proptest::prelude::*;

fn star(hosts: usize) -> Topology {
    Topology::build(&TopologySpec::Star { hosts }, LinkParams::default()).unwrap()
}

fn flow(src: usize, dst: usize, size: u64) -> FlowSpec {
    FlowSpec { src, dst, size, start: FlowStart::At(SimTime::ZERO) }
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).unwrap()
}

#[test]
fn single_flow_on_star_is_pipelined() {
    // n back-to-back packets, one store-and-forward hop: the last packet
    // leaves the host after n serializations and crosses two links.
    let n = 64u64;
    let ser = serialization_time(2048, 200_000_000_000);
    let expected = SimTime::from_nanos(2_000) + SimTime(ser.0 * (n + 1));
    for policy in [Policy::Ecmp, Policy::Flowcut, Policy::Spray] {
        let net = Network::new(star(2), vec![flow(0, 1, n * 2048)], SimParams::new(policy, 200_000_000_000)).unwrap();
        let out = net.run().unwrap();
        let f = &out.report.flows[0];
        assert_eq!(f.end - f.start, expected, "{policy:?}");
        assert_eq!(f.packets, n);
        assert_eq!(f.ooo, 0);
    }
}

#[test]
fn dependent_flow_starts_when_predecessor_ends() {
    let specs = vec![flow(0, 1, 4096), FlowSpec { src: 1, dst: 2, size: 4096, start: FlowStart::After(0) }];
    let out = Network::new(star(3), specs, SimParams::new(Policy::Flowcut, 200_000_000_000)).unwrap().run().unwrap();
    let f = &out.report.flows;
    assert_eq!(f[1].start, f[0].end);
}

#[test]
fn rejects_bad_flows() {
    let p = SimParams::new(Policy::Ecmp, 200_000_000_000);
    assert!(matches!(Network::new(star(2), vec![flow(0, 0, 10)], p.clone()), Err(ConfigError::Workload(_))));
    assert!(matches!(Network::new(star(2), vec![flow(0, 5, 10)], p.clone()), Err(ConfigError::Workload(_))));
    let fwd = vec![FlowSpec { src: 0, dst: 1, size: 1, start: FlowStart::After(1) }, flow(1, 0, 1)];
    assert!(Network::new(star(2), fwd, p).is_err());
}

const PERM: &str = r#"
seeds = [4]
[topology]
kind = "fat-tree"
[workload]
kind = "permutation"
flow_size = 65536
[failures]
fraction = 0.02
"#;

#[test]
fn runs_are_deterministic() {
    let cfg = config(PERM);
    let a = experiment::run(&cfg, Some(1)).unwrap();
    let b = experiment::run(&cfg, Some(1)).unwrap();
    assert_eq!(a[0].report, b[0].report);
    assert_eq!(a[0].report.flows_csv(), b[0].report.flows_csv());
    let mut other = cfg.clone();
    other.seeds = vec![5];
    let c = experiment::run(&other, Some(1)).unwrap();
    assert_ne!(a[0].report.flows_csv(), c[0].report.flows_csv());
}

#[test]
fn parallel_and_serial_runs_agree() {
    let mut cfg = config(PERM);
    cfg.seeds = vec![1, 2, 3];
    let serial = experiment::run(&cfg, Some(1)).unwrap();
    let parallel = experiment::run(&cfg, Some(3)).unwrap();
    for (s, p) in serial.iter().zip(&parallel) {
        assert_eq!(s.seed, p.seed);
        assert_eq!(s.report, p.report);
    }
}

#[test]
fn writes_run_outputs() {
    let mut cfg = config(PERM);
    cfg.trace = true;
    let runs = experiment::run(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    experiment::write_runs(&cfg, &runs, dir.path()).unwrap();
    let seed = dir.path().join("seed-4");
    let csv = std::fs::read_to_string(seed.join("flows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 65);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(seed.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["aggregates"]["flows"], 64);
    assert_eq!(summary["config_digest"].as_str().unwrap(), cfg.digest());
    let trace = std::fs::read_to_string(seed.join("trace.txt")).unwrap();
    assert!(trace.lines().any(|l| l.ends_with(" data")));
    let back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn sweep_covers_the_grid() {
    let mut cfg = config(PERM);
    cfg.seeds = vec![1, 2];
    let axes = [Axis::parse("routing.policy=ecmp,flowcut").unwrap(), Axis::parse("failures.fraction=0,0.02").unwrap()];
    let res = experiment::sweep(&cfg, &axes, None).unwrap();
    assert_eq!(res.rows.len(), 8);
    let csv = res.csv();
    assert!(csv.starts_with("routing.policy,failures.fraction,seed,flows,"));
    assert_eq!(csv.lines().count(), 9);
    assert!(res.cell_avg_fct_ns(&["flowcut", "0.02"]).is_some());
    assert!(experiment::sweep(&cfg, &[Axis::parse("routing.nope=1").unwrap()], None).is_err());
}

#[test]
fn timeout_disabled_with_lost_xons_deadlocks() {
    let mut cfg = config(
        r#"
seeds = [1]
[topology]
kind = "fat-tree"
[routing]
xon_loss = 1.0
resume_timeout_ns = 0
[workload]
kind = "permutation"
flow_size = 1048576
[failures]
fraction = 0.01
"#,
    );
    let err = experiment::run(&cfg, None).err().expect("deadlock");
    assert_eq!(err.exit_code(), 2);
    cfg.routing.resume_timeout_ns = None;
    let ok = experiment::run(&cfg, None).unwrap();
    assert_eq!(ok[0].report.aggregates.flows, 64);
}

fn topology(kind: u8) -> &'static str {
    match kind {
        0 => "kind = \"fat-tree\"\npods = 2\ntors_per_pod = 2\nhosts_per_tor = 4",
        1 => "kind = \"fat-tree\"\npods = 2\ntors_per_pod = 2\nhosts_per_tor = 4\ntaper = 2",
        _ => "kind = \"dragonfly\"\ngroups = 3\nswitches_per_group = 2\nhosts_per_switch = 2\nglobal_links_per_group_pair = 1",
    }
}

fn workload(kind: u8) -> &'static str {
    match kind {
        0 => "kind = \"permutation\"\nflow_size = 40000",
        1 => "kind = \"all-to-all\"\nflow_size = 9000\nwindow = 2",
        _ => "kind = \"random-uniform\"\nflows_per_host = 2\ncdf_points = [[1000, 0.0], [60000, 1.0]]",
    }
}

fn small(topo: u8, wl: u8, policy: &str, failures: f64, seed: u64) -> ExperimentConfig {
    config(&format!(
        "seeds = [{seed}]\ntrace = true\n[topology]\n{}\nbandwidth_gbps = 100\n[routing]\npolicy = \"{policy}\"\n[workload]\n{}\n[failures]\nfraction = {failures:?}\n[network]\ncheck_invariants = true\nbuffer_bytes = 16384\n",
        topology(topo),
        workload(wl)
    ))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    /// Full-drain flowcut never reorders, and credits, bytes and in-flight
    /// counters balance after every event.
    #[test]
    fn flowcut_is_in_order_and_conserving(topo in 0u8..3, wl in 0u8..3, nic in any::<bool>(), fail in prop_oneof![Just(0.0), Just(0.1)], seed in 1u64..1000) {
        let cfg = small(topo, wl, if nic { "nic-flowcut" } else { "flowcut" }, fail, seed);
        let runs = experiment::run(&cfg, Some(1)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let r = &runs[0].report;
        prop_assert_eq!(r.aggregates.ooo_packets, 0);
        for f in &r.flows {
            prop_assert_eq!(f.packets, packet_count(f.size, 2048));
        }
    }

    /// Every policy delivers every packet exactly once.
    #[test]
    fn all_policies_deliver_everything(policy in 0usize..8, wl in 0u8..3, seed in 1u64..1000) {
        let names = ["ecmp", "spray", "flowlet", "flowcell", "ugal", "valiant", "flowcut", "nic-flowcut"];
        // UGAL and Valiant only make sense on a Dragonfly.
        let topo = if policy == 4 || policy == 5 { 2 } else { (seed % 3) as u8 };
        let cfg = small(topo, wl, names[policy], 0.0, seed);
        let runs = experiment::run(&cfg, Some(1)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let r = &runs[0].report;
        let packets: u64 = r.flows.iter().map(|f| packet_count(f.size, 2048)).sum();
        prop_assert_eq!(r.aggregates.delivered_packets, packets);
        prop_assert!(r.flows.iter().all(|f| f.end >= f.start));
    }

    /// Partial resume keeps the receiver within its out-of-order bound.
    #[test]
    fn partial_resume_respects_bound(bound in 1u32..5, seed in 1u64..1000) {
        let mut cfg = small(2, 1, "flowcut", 0.1, seed);
        cfg.routing.ood_bound = Some(bound);
        cfg.network.check_invariants = false;
        let runs = experiment::run(&cfg, Some(1)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(runs[0].report.aggregates.max_ood <= bound);
    }
}
