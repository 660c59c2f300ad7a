use std::path::Path;
use std::process::{Command, Output};

fn flowcut(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcut")).args(args).current_dir(dir).output().expect("spawn flowcut")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seeds = [1, 2]
[topology]
kind = "fat-tree"
pods = 2
tors_per_pod = 2
hosts_per_tor = 2
[workload]
kind = "permutation"
flow_size = 32768
"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

#[test]
fn run_writes_reports() {
    let dir = setup(SMALL);
    let o = flowcut(&["run", "exp.toml", "--out", "res", "--trace"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed 1: 8 flows"));
    for seed in ["seed-1", "seed-2"] {
        let d = dir.path().join("res").join(seed);
        assert!(d.join("flows.csv").exists());
        assert!(d.join("summary.json").exists());
        assert!(d.join("trace.txt").exists());
    }
    assert!(dir.path().join("res/config.toml").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = setup(SMALL);
    let o = flowcut(&["run", "exp.toml", "--seed", "9"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("flowcut-out/seed-9").exists());
    assert!(!dir.path().join("flowcut-out/seed-1").exists());
}

#[test]
fn sweep_writes_csv() {
    let dir = setup(SMALL);
    let o = flowcut(&["sweep", "exp.toml", "--axis", "routing.policy=ecmp,spray", "--seed", "3", "--out", "sw"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("routing.policy,seed,flows,avg_fct_ns"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("ecmp,3,8,"));
}

#[test]
fn config_errors_exit_1() {
    let dir = setup(&format!("{SMALL}\nbogus = 1\n"));
    let o = flowcut(&["run", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(flowcut(&["run", "missing.toml"], dir.path()).status.code(), Some(1));
    let dir = setup(SMALL);
    let o = flowcut(&["sweep", "exp.toml", "--axis", "routing.alpha=2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(flowcut(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(flowcut(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn deadlock_exits_2() {
    let cfg = SMALL.replace("[workload]", "[routing]\nxon_loss = 1.0\nresume_timeout_ns = 0\nrtt_ratio_threshold = 1.0\n[workload]")
        .replace("flow_size = 32768", "flow_size = 1048576")
        + "[failures]\nfraction = 0.1\n";
    let dir = setup(&cfg);
    let o = flowcut(&["run", "exp.toml", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("deadlock"));
}

#[test]
fn model_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowcut(&["model", "ack-overhead", "--mtu", "1024,2048"], dir.path());
    assert_eq!(stdout(&o), "mtu,ack_overhead\n1024,0.019531\n2048,0.009766\n");
    let o = flowcut(&["model", "memory", "--flows", "1,1000000", "--latency-us", "50"], dir.path());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "flows_per_host,latency_us,active_flows,memory_bytes");
    assert_eq!(lines[1], "1,50,1024.000,11264.000");
    let mem: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!(mem < 7.0 * 1024.0 * 1024.0);
    assert_eq!(flowcut(&["model", "ack-overhead", "--mtu", "0"], dir.path()).status.code(), Some(1));
}

#[test]
fn export_topology_edge_list() {
    let dir = setup(SMALL);
    let o = flowcut(&["export-topology", "exp.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(!text.is_empty());
    let o = flowcut(&["export-topology", "exp.toml", "--out", "edges.txt"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("edges.txt")).unwrap(), text);
}
