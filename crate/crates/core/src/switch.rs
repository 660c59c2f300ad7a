//! Flowcut switch state: the flowcut table, RTT normalization and the drain
//! trigger.
//!
//! Only the ingress switch of a flow (the one its source host is attached
//! to) measures RTTs and decides when to drain. Downstream switches keep a
//! transit entry with the ports and in-flight bytes so that ACKs can retrace
//! the data path and so that the flowcut stays on one path.

use std::collections::VecDeque;

use rustc_hash::FxHashMap;

use crate::error::{ConfigError, SimError};
use crate::packet::{FlowId, FlowKey, HostId, Packet, MAX_HOP_COUNT};
use crate::topology::{LinkId, PortId};

/// Parameters of the drain trigger.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CongestionParams {
    pub alpha: f64,
    pub rtt_ratio_threshold: f64,
    pub rtt_growth_threshold: f64,
    /// Serialization time of one byte, in nanoseconds.
    pub t_per_byte_ns: f64,
}

impl CongestionParams {
    pub fn for_bandwidth(bandwidth_bps: u64) -> Self {
        CongestionParams {
            alpha: 0.9,
            rtt_ratio_threshold: 4.0,
            rtt_growth_threshold: 0.5,
            t_per_byte_ns: 8e9 / bandwidth_bps as f64,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Routing(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} must be in (0, 1]", self.alpha));
        }
        if !(self.rtt_ratio_threshold >= 1.0) {
            return bad(format!("rtt_ratio_threshold {} must be >= 1", self.rtt_ratio_threshold));
        }
        if !(self.rtt_growth_threshold > 0.0) {
            return bad(format!("rtt_growth_threshold {} must be > 0", self.rtt_growth_threshold));
        }
        if !(self.t_per_byte_ns > 0.0 && self.t_per_byte_ns.is_finite()) {
            return bad("per-byte transmission time must be positive".into());
        }
        Ok(())
    }
}

/// Minimum RTT seen for each hop count, with the serialization term removed.
#[derive(Clone, Debug, Default)]
pub struct RttFloorTable {
    floor_ns: [Option<f64>; MAX_HOP_COUNT as usize + 1],
}

impl RttFloorTable {
    pub fn get(&self, hops: u8) -> Option<f64> {
        self.floor_ns.get(hops as usize).copied().flatten()
    }

    pub fn set(&mut self, hops: u8, ns: f64) {
        self.floor_ns[hops as usize] = Some(ns);
    }
}

/// RTT divided by the best RTT seen for the same hop count, after
/// accounting for the serialization of a `packet_bytes` packet over `hops`
/// hops. Updates the floor and never returns less than 1.
pub fn normalized_rtt(
    measured_ns: f64,
    packet_bytes: u32,
    hops: u8,
    params: &CongestionParams,
    floor: &mut RttFloorTable,
) -> Result<f64, SimError> {
    if hops > MAX_HOP_COUNT {
        return Err(SimError::HopCountOverflow(hops as u32));
    }
    let ser = packet_bytes as f64 * hops as f64 * params.t_per_byte_ns;
    let base = (measured_ns - ser).max(0.0);
    let r_min = match floor.get(hops) {
        None => {
            floor.set(hops, base);
            return Ok(1.0);
        }
        Some(r) if base < r => {
            floor.set(hops, base);
            base
        }
        Some(r) => r,
    };
    let denom = r_min + ser;
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((measured_ns / denom).max(1.0))
}

/// Exponential averages of the normalized RTT and of its per-ACK change.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RttEstimator {
    pub ema: f64,
    pub delta_ema: f64,
    pub last: Option<f64>,
}

impl RttEstimator {
    pub fn update(&mut self, n: f64, alpha: f64) {
        match self.last {
            None => {
                self.ema = n;
                self.delta_ema = 0.0;
            }
            Some(last) => {
                self.ema = alpha * n + (1.0 - alpha) * self.ema;
                self.delta_ema = alpha * (n - last) + (1.0 - alpha) * self.delta_ema;
            }
        }
        self.last = Some(n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrainDecision {
    None,
    Drain,
}

/// Drain when the averaged RTT ratio or its growth strictly exceeds its
/// threshold.
pub fn evaluate_drain(est: &RttEstimator, params: &CongestionParams) -> DrainDecision {
    if est.last.is_some() && (est.ema > params.rtt_ratio_threshold || est.delta_ema > params.rtt_growth_threshold) {
        DrainDecision::Drain
    } else {
        DrainDecision::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrainState {
    Active,
    /// XOFF sent; waiting for in-flight bytes to reach zero.
    Draining,
    /// Partial-resume mode: XON sent while the previous flowcut still has
    /// packets in flight; the new flowcut runs under a packet budget.
    DrainedAwaitingResume,
}

/// Credits a packet holds on the link it arrived over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Charge {
    pub link: LinkId,
    pub vc: u8,
    pub bytes: u32,
}

#[derive(Clone, Debug)]
pub struct QueuedPacket {
    pub packet: Packet,
    pub charge: Option<Charge>,
}

/// Previous flowcut still draining in partial-resume mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Predecessor {
    pub epoch: u8,
    pub out_port: PortId,
    pub inflight_bytes: u64,
    pub inflight_packets: u32,
}

#[derive(Clone, Debug)]
pub struct FlowcutEntry {
    pub flow: FlowId,
    pub src: HostId,
    /// Port facing the source host.
    pub in_port: PortId,
    /// Chosen on the first packet of the flowcut.
    pub out_port: Option<PortId>,
    pub via_group: Option<usize>,
    pub epoch: u8,
    pub inflight_bytes: u64,
    pub inflight_packets: u32,
    pub rtt: RttEstimator,
    pub drain_state: DrainState,
    pub predecessor: Option<Predecessor>,
    /// Packets the current flowcut may still send while a predecessor drains.
    pub budget: u32,
    /// Packets waiting for the predecessor to drain.
    pub held: VecDeque<QueuedPacket>,
    pub flowcut_seq: u32,
}

impl FlowcutEntry {
    pub fn new(flow: FlowId, src: HostId, in_port: PortId, flowcut_seq: u32) -> Self {
        FlowcutEntry {
            flow,
            src,
            in_port,
            out_port: None,
            via_group: None,
            epoch: 0,
            inflight_bytes: 0,
            inflight_packets: 0,
            rtt: RttEstimator::default(),
            drain_state: DrainState::Active,
            predecessor: None,
            budget: 0,
            held: VecDeque::new(),
            flowcut_seq,
        }
    }

    /// Whether the entry can be dropped from the table.
    pub fn is_idle(&self) -> bool {
        self.inflight_bytes == 0 && self.predecessor.is_none() && self.held.is_empty()
    }

    /// Start a new flowcut while the current one still has `inflight_packets`
    /// in flight, allowing at most `ood_bound` reordering at the receiver.
    pub fn split(&mut self, ood_bound: u32) {
        debug_assert!(self.predecessor.is_none() && self.inflight_packets <= ood_bound);
        self.predecessor = Some(Predecessor {
            epoch: self.epoch,
            out_port: self.out_port.expect("split before first packet"),
            inflight_bytes: self.inflight_bytes,
            inflight_packets: self.inflight_packets,
        });
        self.budget = ood_bound + 1 - self.inflight_packets;
        self.epoch ^= 1;
        self.out_port = None;
        self.via_group = None;
        self.inflight_bytes = 0;
        self.inflight_packets = 0;
        self.rtt = RttEstimator::default();
        self.drain_state = DrainState::DrainedAwaitingResume;
    }

    /// Start a new flowcut once the current one is fully acknowledged.
    pub fn restart(&mut self) {
        debug_assert!(self.predecessor.is_none() && self.inflight_bytes == 0);
        self.epoch ^= 1;
        self.out_port = None;
        self.via_group = None;
        self.rtt = RttEstimator::default();
        self.drain_state = DrainState::Active;
    }
}

/// State kept by a non-ingress switch for one flowcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransitEntry {
    pub in_port: PortId,
    pub out_port: PortId,
    pub inflight_bytes: u64,
}

/// Flowcut table of one switch.
#[derive(Debug)]
pub struct FlowcutTable {
    pub capacity: usize,
    pub ingress: FxHashMap<FlowKey, FlowcutEntry>,
    pub transit: FxHashMap<(FlowKey, u8), TransitEntry>,
    pub max_occupancy: usize,
    /// Packets routed by ECMP because the table was full.
    pub fallbacks: u64,
    pub stale_acks: u64,
    pub rtt_floor: RttFloorTable,
}

impl FlowcutTable {
    pub fn new(capacity: usize) -> Self {
        FlowcutTable {
            capacity,
            ingress: FxHashMap::default(),
            transit: FxHashMap::default(),
            max_occupancy: 0,
            fallbacks: 0,
            stale_acks: 0,
            rtt_floor: RttFloorTable::default(),
        }
    }

    pub fn occupancy(&self) -> usize {
        self.ingress.len() + self.transit.len()
    }

    pub fn is_full(&self) -> bool {
        self.occupancy() >= self.capacity
    }

    pub(crate) fn note_occupancy(&mut self) {
        self.max_occupancy = self.max_occupancy.max(self.occupancy());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> CongestionParams {
        CongestionParams::for_bandwidth(200_000_000_000)
    }

    #[test]
    fn first_observation_initializes_floor() {
        let mut floor = RttFloorTable::default();
        assert_eq!(normalized_rtt(5000.0, 2048, 3, &params(), &mut floor).unwrap(), 1.0);
        let pht = 2048.0 * 3.0 * 0.04;
        assert!((floor.get(3).unwrap() - (5000.0 - pht)).abs() < 1e-9);
        assert_eq!(normalized_rtt(5000.0, 2048, 3, &params(), &mut floor).unwrap(), 1.0);
    }

    #[test]
    fn normalized_rtt_formula() {
        let mut floor = RttFloorTable::default();
        floor.set(3, 4000.0);
        let n = normalized_rtt(12000.0, 2048, 3, &params(), &mut floor).unwrap();
        // Independent evaluation: p*h*t = 2048 * 3 * 8 / 200 ns.
        let expected = 12000.0 / (4000.0 + 2048.0 * 3.0 * 8.0 / 200.0);
        assert!((n - expected).abs() < 1e-12);
        assert!((n - 2.826).abs() < 5e-4);
    }

    #[test]
    fn serialization_term_scales_with_packet_size() {
        let q = 3000.0;
        let mut f1 = RttFloorTable::default();
        f1.set(3, 4000.0);
        let mut f2 = f1.clone();
        let small = normalized_rtt(4000.0 + 245.76 + q, 2048, 3, &params(), &mut f1).unwrap();
        let large = normalized_rtt(4000.0 + 491.52 + q, 4096, 3, &params(), &mut f2).unwrap();
        let oracle = |ser: f64| (4000.0 + ser + q) / (4000.0 + ser);
        assert!((small - oracle(245.76)).abs() < 1e-9);
        assert!((large - oracle(491.52)).abs() < 1e-9);
    }

    #[test]
    fn hop_count_beyond_wire_field_is_fatal() {
        let mut floor = RttFloorTable::default();
        assert!(matches!(
            normalized_rtt(1.0, 1, 16, &params(), &mut floor),
            Err(SimError::HopCountOverflow(16))
        ));
    }

    #[test]
    fn drain_trigger_examples() {
        let p = params();
        let est = |ema, delta| RttEstimator { ema, delta_ema: delta, last: Some(ema) };
        assert_eq!(evaluate_drain(&est(4.2, 0.0), &p), DrainDecision::Drain);
        assert_eq!(evaluate_drain(&est(4.0, 0.0), &p), DrainDecision::None);
        assert_eq!(evaluate_drain(&est(1.0, 0.0), &p), DrainDecision::None);
        assert_eq!(evaluate_drain(&est(2.0, 0.6), &p), DrainDecision::Drain);
        assert_eq!(evaluate_drain(&RttEstimator::default(), &p), DrainDecision::None);
    }

    #[test]
    fn ema_updates() {
        let mut e = RttEstimator::default();
        e.update(2.0, 0.5);
        assert_eq!((e.ema, e.delta_ema), (2.0, 0.0));
        e.update(4.0, 0.5);
        assert_eq!((e.ema, e.delta_ema), (3.0, 1.0));
        e.update(4.0, 0.5);
        assert_eq!((e.ema, e.delta_ema), (3.5, 0.5));
        let mut idle = RttEstimator::default();
        for _ in 0..100 {
            idle.update(1.0, 0.9);
        }
        assert_eq!(evaluate_drain(&idle, &params()), DrainDecision::None);
    }

    #[test]
    fn split_sets_budget() {
        let mut e = FlowcutEntry::new(0, 0, 0, 0);
        e.out_port = Some(4);
        e.inflight_packets = 2;
        e.inflight_bytes = 4096;
        e.split(3);
        assert_eq!(e.budget, 2);
        assert_eq!(e.epoch, 1);
        assert_eq!(e.predecessor.unwrap().inflight_bytes, 4096);
        assert!(!e.is_idle());
    }

    proptest! {
        #[test]
        fn normalized_rtt_at_least_one(samples in proptest::collection::vec((0.0f64..1e6, 1u32..9000, 0u8..16), 1..50)) {
            let mut floor = RttFloorTable::default();
            for (m, p, h) in samples {
                let n = normalized_rtt(m, p, h, &params(), &mut floor).unwrap();
                prop_assert!(n >= 1.0);
            }
        }

        #[test]
        fn floor_is_nonincreasing(samples in proptest::collection::vec(0.0f64..1e6, 1..50)) {
            let mut floor = RttFloorTable::default();
            let mut prev = f64::INFINITY;
            for m in samples {
                normalized_rtt(m, 2048, 3, &params(), &mut floor).unwrap();
                let f = floor.get(3).unwrap();
                prop_assert!(f <= prev);
                prev = f;
            }
        }
    }
}
