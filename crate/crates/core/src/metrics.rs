//! Per-flow records, run aggregates and their file formats.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::time::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("percentile of an empty set")]
    Empty,
    #[error("percentile rank {0} outside [0, 100]")]
    Rank(f64),
}

/// Nearest-rank percentile: the smallest value with at least `q` percent of
/// the set at or below it.
pub fn percentile<T: Copy + PartialOrd>(values: &[T], q: f64) -> Result<T, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(MetricsError::Rank(q));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("percentile of NaN"));
    let rank = ((q / 100.0 * v.len() as f64).ceil() as usize).max(1);
    Ok(v[rank - 1])
}

/// Outcome of one flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key_hash: u64,
    pub src: usize,
    pub dst: usize,
    pub size: u64,
    pub start: SimTime,
    pub end: SimTime,
    pub packets: u64,
    pub ooo: u64,
    /// Largest distance between an arriving PSN and the lowest missing one.
    pub ood: u32,
    pub paused: SimTime,
    pub paused_intervals: Vec<(SimTime, SimTime)>,
    pub drains: u32,
    pub reroutes: u32,
}

impl FlowRecord {
    pub fn fct(&self) -> SimTime {
        self.end - self.start
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub flows: usize,
    pub avg_fct_ns: f64,
    pub p99_fct_ns: f64,
    pub max_fct_ns: f64,
    pub delivered_packets: u64,
    pub ooo_packets: u64,
    pub ooo_fraction: f64,
    pub max_ood: u32,
    pub draining_impact: f64,
    pub drains: u64,
    pub reroutes: u64,
}

/// Bytes clocked onto switch-to-switch links.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricCounters {
    pub data_wire_bytes: u64,
    pub data_payload_bytes: u64,
    pub ack_bytes: u64,
    pub nic_ack_bytes: u64,
    pub signal_bytes: u64,
}

impl FabricCounters {
    /// ACK bytes per data payload byte.
    pub fn ack_share(&self) -> f64 {
        if self.data_payload_bytes == 0 {
            0.0
        } else {
            (self.ack_bytes + self.nic_ack_bytes) as f64 / self.data_payload_bytes as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub bucket_ns: u64,
    /// Payload bytes delivered to hosts in each bucket.
    pub delivered_bytes: Vec<u64>,
}

impl Timeline {
    pub fn new(bucket: SimTime) -> Self {
        Timeline { bucket_ns: bucket.as_ps() / 1000, delivered_bytes: Vec::new() }
    }

    pub fn record(&mut self, at: SimTime, bytes: u64) {
        let i = (at.as_ps() / (self.bucket_ns.max(1) * 1000)) as usize;
        if self.delivered_bytes.len() <= i {
            self.delivered_bytes.resize(i + 1, 0);
        }
        self.delivered_bytes[i] += bytes;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchStats {
    pub switch: String,
    pub max_table_occupancy: usize,
    pub table_fallbacks: u64,
    pub stale_acks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub events: u64,
    pub stale_acks: u64,
    pub stale_control: u64,
    pub lost_xons: u64,
    pub lost_acks: u64,
    pub resume_timeouts: u64,
    pub table_fallbacks: u64,
    /// Largest RTT measured by an ingress switch or NIC.
    pub max_ingress_rtt_ns: f64,
    /// Most flows a single host had started but not finished.
    pub max_concurrent_flows_per_host: usize,
    pub max_table_occupancy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub seed: u64,
    pub policy: String,
    pub final_time_ns: f64,
    pub aggregates: Aggregates,
    pub counters: Counters,
    pub fabric: FabricCounters,
    pub switches: Vec<SwitchStats>,
    pub timeline: Timeline,
    #[serde(skip)]
    pub flows: Vec<FlowRecord>,
}

pub const FLOWS_CSV_HEADER: &str = "flow_key_hash,src,dst,size,start_ns,end_ns,fct_ns,ooo,paused_ns,drains";

/// Mean over flows of the fraction of their lifetime spent paused. Flows
/// with zero FCT contribute zero.
pub fn draining_impact(flows: &[FlowRecord]) -> f64 {
    if flows.is_empty() {
        return 0.0;
    }
    let sum: f64 = flows
        .iter()
        .map(|f| {
            let fct = f.fct().as_ps();
            if fct == 0 {
                0.0
            } else {
                f.paused.as_ps() as f64 / fct as f64
            }
        })
        .sum();
    sum / flows.len() as f64
}

/// Mismatched-PSN arrivals over all delivered data packets.
pub fn ooo_fraction(flows: &[FlowRecord]) -> f64 {
    let delivered: u64 = flows.iter().map(|f| f.packets).sum();
    if delivered == 0 {
        return 0.0;
    }
    flows.iter().map(|f| f.ooo).sum::<u64>() as f64 / delivered as f64
}

pub fn aggregate(flows: &[FlowRecord]) -> Aggregates {
    let fcts: Vec<u64> = flows.iter().map(|f| f.fct().as_ps()).collect();
    let ns = |ps: u64| ps as f64 / 1000.0;
    Aggregates {
        flows: flows.len(),
        avg_fct_ns: if fcts.is_empty() { 0.0 } else { ns(fcts.iter().sum::<u64>()) / fcts.len() as f64 },
        p99_fct_ns: percentile(&fcts, 99.0).map(ns).unwrap_or(0.0),
        max_fct_ns: fcts.iter().copied().max().map(ns).unwrap_or(0.0),
        delivered_packets: flows.iter().map(|f| f.packets).sum(),
        ooo_packets: flows.iter().map(|f| f.ooo).sum(),
        ooo_fraction: ooo_fraction(flows),
        max_ood: flows.iter().map(|f| f.ood).max().unwrap_or(0),
        draining_impact: draining_impact(flows),
        drains: flows.iter().map(|f| f.drains as u64).sum(),
        reroutes: flows.iter().map(|f| f.reroutes as u64).sum(),
    }
}

impl RunReport {
    pub fn flows_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.flows.len() + 1));
        out.push_str(FLOWS_CSV_HEADER);
        out.push('\n');
        for f in &self.flows {
            let _ = writeln!(
                out,
                "{:016x},{},{},{},{},{},{},{},{},{}",
                f.key_hash,
                f.src,
                f.dst,
                f.size,
                f.start.fmt_nanos(),
                f.end.fmt_nanos(),
                f.fct().fmt_nanos(),
                f.ooo,
                f.paused.fmt_nanos(),
                f.drains
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Write `flows.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("flows.csv");
        std::fs::write(&csv, self.flows_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        std::fs::write(&json, self.summary_json()).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(start: u64, end: u64, paused: u64) -> FlowRecord {
        FlowRecord {
            key_hash: 1,
            src: 0,
            dst: 1,
            size: 10,
            start: SimTime::from_nanos(start),
            end: SimTime::from_nanos(end),
            packets: 1,
            ooo: 0,
            ood: 0,
            paused: SimTime::from_nanos(paused),
            paused_intervals: Vec::new(),
            drains: 0,
            reroutes: 0,
        }
    }

    #[test]
    fn nearest_rank_examples() {
        assert_eq!(percentile(&[5], 99.0), Ok(5));
        let v: Vec<u32> = (1..=100).collect();
        assert_eq!(percentile(&v, 99.0), Ok(99));
        assert_eq!(percentile(&v, 100.0), Ok(100));
        assert_eq!(percentile(&v, 0.0), Ok(1));
        assert_eq!(percentile::<u32>(&[], 50.0), Err(MetricsError::Empty));
        assert_eq!(percentile(&[1], 101.0), Err(MetricsError::Rank(101.0)));
    }

    #[test]
    fn draining_impact_examples() {
        assert_eq!(draining_impact(&[rec(0, 100, 0)]), 0.0);
        assert_eq!(draining_impact(&[rec(0, 100, 50), rec(0, 100, 0)]), 0.25);
        assert_eq!(draining_impact(&[]), 0.0);
    }

    #[test]
    fn csv_header_is_stable() {
        let r = RunReport {
            config_digest: String::new(),
            seed: 0,
            policy: "ecmp".into(),
            final_time_ns: 0.0,
            aggregates: Aggregates::default(),
            counters: Counters::default(),
            fabric: FabricCounters::default(),
            switches: Vec::new(),
            timeline: Timeline::default(),
            flows: vec![rec(0, 1082, 0)],
        };
        assert_eq!(
            r.flows_csv(),
            "flow_key_hash,src,dst,size,start_ns,end_ns,fct_ns,ooo,paused_ns,drains\n\
             0000000000000001,0,1,10,0.000,1082.000,1082.000,0,0.000,0\n"
        );
    }

    #[test]
    fn timeline_buckets() {
        let mut t = Timeline::new(SimTime::from_micros(10));
        t.record(SimTime::from_nanos(500), 100);
        t.record(SimTime::from_nanos(25_000), 7);
        assert_eq!(t.delivered_bytes, vec![100, 0, 7]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn matches_sort_and_index(v in proptest::collection::vec(0u32..1000, 1..60), q in 0.0f64..=100.0) {
            let mut s = v.clone();
            s.sort();
            // Oracle: first element whose rank covers q percent.
            let idx = (0..s.len()).find(|&i| (i + 1) as f64 * 100.0 >= q * s.len() as f64).unwrap();
            prop_assert_eq!(percentile(&v, q).unwrap(), s[idx]);
        }
    }
}
