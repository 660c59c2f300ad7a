//! Closed-form resource models: active flows, switch memory and ACK
//! bandwidth overhead.

use std::fmt::Write;

use crate::packet::{ACK_WIRE_BYTES, FLOWCUT_HEADER_BYTES};

/// Inputs of the active-flow model. Units are explicit: bandwidth in bits
/// per second, latency in seconds, MTU in bytes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResourceModelInputs {
    pub hosts: f64,
    pub flows_per_host: f64,
    pub bandwidth_bps: f64,
    pub latency_s: f64,
    pub mtu_bytes: f64,
    pub per_flow_bytes: f64,
}

impl ResourceModelInputs {
    /// Full-size packets one flow can have in flight within `latency_s`
    /// when the host link is shared by `flows_per_host` flows.
    pub fn packets_in_flight_per_flow(&self) -> f64 {
        self.bandwidth_bps / 8.0 * self.latency_s / (self.flows_per_host * self.mtu_bytes)
    }
}

/// Number of flows holding table entries at one switch in the worst case.
///
/// While each flow can keep at least one packet in flight, every flow is
/// active. Beyond that, the host link limits the number of active flows to
/// the packets it can put in flight per host.
pub fn active_flows(i: &ResourceModelInputs) -> f64 {
    if i.packets_in_flight_per_flow() >= 1.0 {
        i.hosts * i.flows_per_host
    } else {
        i.hosts * i.bandwidth_bps / 8.0 * i.latency_s / i.mtu_bytes
    }
}

/// Worst-case table memory in bytes when one switch sees every active flow.
pub fn memory_occupancy(i: &ResourceModelInputs) -> f64 {
    active_flows(i) * i.per_flow_bytes
}

/// ACK bytes per data byte for full-size packets.
pub fn ack_overhead(mtu_bytes: u32) -> f64 {
    assert!(mtu_bytes > 0, "mtu must be positive");
    ACK_WIRE_BYTES as f64 / mtu_bytes as f64
}

/// Payload left in an MTU once the flowcut header is added.
pub fn effective_mtu(mtu_bytes: u32) -> u32 {
    mtu_bytes.saturating_sub(FLOWCUT_HEADER_BYTES)
}

/// CSV sweep of the memory model over flows per host (columns:
/// `flows_per_host,latency_us,active_flows,memory_bytes`).
pub fn memory_model_csv(base: &ResourceModelInputs, flows: &[f64], latencies_us: &[f64]) -> String {
    let mut out = String::from("flows_per_host,latency_us,active_flows,memory_bytes\n");
    for &l in latencies_us {
        for &f in flows {
            let i = ResourceModelInputs { flows_per_host: f, latency_s: l * 1e-6, ..*base };
            let _ = writeln!(out, "{},{},{:.3},{:.3}", f, l, active_flows(&i), memory_occupancy(&i));
        }
    }
    out
}

/// CSV of ACK overhead per MTU (columns: `mtu,ack_overhead`).
pub fn ack_overhead_csv(mtus: &[u32]) -> String {
    let mut out = String::from("mtu,ack_overhead\n");
    for &m in mtus {
        let _ = writeln!(out, "{},{:.6}", m, ack_overhead(m));
    }
    out
}
