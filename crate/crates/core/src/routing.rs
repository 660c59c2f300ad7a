//! Routing policies and their per-switch state.

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::packet::{mix64, FlowKey};
use crate::time::SimTime;
use crate::topology::PortId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Ecmp,
    Spray,
    Flowlet,
    Flowcell,
    Ugal,
    Valiant,
    /// Flowcut decided by switches.
    Flowcut,
    /// Flowcut decided by the source NIC; switches run ECMP.
    NicFlowcut,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Ecmp => "ecmp",
            Policy::Spray => "spray",
            Policy::Flowlet => "flowlet",
            Policy::Flowcell => "flowcell",
            Policy::Ugal => "ugal",
            Policy::Valiant => "valiant",
            Policy::Flowcut => "flowcut",
            Policy::NicFlowcut => "nic-flowcut",
        }
    }

    /// Per-flow state each switch keeps, in bytes, for the memory model.
    pub fn per_flow_bytes(self) -> Option<u32> {
        match self {
            Policy::Flowcell => Some(2),
            Policy::Flowlet => Some(5),
            Policy::Flowcut => Some(11),
            _ => None,
        }
    }

    pub fn requires_dragonfly(self) -> bool {
        matches!(self, Policy::Ugal | Policy::Valiant)
    }
}

/// Deterministic hash of the 5-tuple into `n` buckets, salted per switch so
/// successive switches make independent choices.
pub fn ecmp_index(key: &FlowKey, salt: u64, n: usize) -> usize {
    debug_assert!(n > 0);
    (mix64(key.hash64() ^ mix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15))) % n as u64) as usize
}

/// Output-port load as the time needed to drain its backlog.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PortLoad {
    pub port: PortId,
    pub bytes: u64,
    pub bandwidth_bps: u64,
}

impl PortLoad {
    /// `self` drains strictly faster than `other`.
    fn lighter_than(&self, other: &PortLoad) -> bool {
        (self.bytes as u128) * (other.bandwidth_bps as u128) < (other.bytes as u128) * (self.bandwidth_bps as u128)
    }

    /// Backlog in picoseconds, for products with hop counts.
    pub fn drain_time(&self) -> u128 {
        (self.bytes as u128 * 8_000_000_000_000).div_ceil(self.bandwidth_bps as u128)
    }
}

/// Port with the smallest backlog drain time; ties go to the lowest port id.
pub fn least_loaded<I: IntoIterator<Item = PortLoad>>(loads: I) -> PortLoad {
    let mut best: Option<PortLoad> = None;
    for l in loads {
        best = match best {
            None => Some(l),
            Some(b) if l.lighter_than(&b) || (!b.lighter_than(&l) && l.port < b.port) => Some(l),
            keep => keep,
        };
    }
    best.expect("least_loaded needs at least one candidate")
}

/// Like [`least_loaded`], but ties are broken uniformly at random.
pub fn least_loaded_random<I, R>(loads: I, rng: &mut R) -> PortLoad
where
    I: IntoIterator<Item = PortLoad>,
    R: Rng + ?Sized,
{
    let mut best: Option<PortLoad> = None;
    let mut ties = 0u32;
    for l in loads {
        match best {
            Some(b) if b.lighter_than(&l) => {}
            Some(b) if !l.lighter_than(&b) => {
                ties += 1;
                if rng.gen_range(0..ties) == 0 {
                    best = Some(l);
                }
            }
            _ => {
                best = Some(l);
                ties = 1;
            }
        }
    }
    best.expect("least_loaded needs at least one candidate")
}

/// UGAL: take the minimal path unless its queue-hop product is larger.
pub fn ugal_prefers_minimal(q_min: u128, h_min: u128, q_nonmin: u128, h_nonmin: u128) -> bool {
    q_min * h_min <= q_nonmin * h_nonmin
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowletPreset {
    /// Shortest gap: most path changes, lowest FCT, most reordering.
    Best,
    Balanced,
    /// Longest gap: rarely reroutes.
    LowestOoo,
}

impl FlowletPreset {
    pub fn default_timeout(self) -> SimTime {
        match self {
            FlowletPreset::Best => SimTime::from_micros(2),
            FlowletPreset::Balanced => SimTime::from_micros(10),
            FlowletPreset::LowestOoo => SimTime::from_micros(50),
        }
    }
}

/// One point of a flowlet-timeout sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowletSample {
    pub timeout: SimTime,
    pub p99_fct_ns: f64,
    pub ooo_fraction: f64,
}

/// Pick the three preset timeouts from a sweep: best minimizes p99 FCT,
/// lowest-OOO minimizes the OOO fraction, balanced minimizes the sum of both
/// after scaling each to `[0, 1]` over the sweep. Ties go to the shorter
/// timeout.
pub fn calibrate_flowlet_presets(samples: &[FlowletSample]) -> Option<[(FlowletPreset, SimTime); 3]> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by_key(|x| x.timeout);
    let argmin = |f: &dyn Fn(&FlowletSample) -> f64| {
        s.iter().fold(&s[0], |b, x| if f(x) < f(b) { x } else { b }).timeout
    };
    let range = |f: &dyn Fn(&FlowletSample) -> f64| {
        let lo = s.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = s.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (flo, fspan) = range(&|x| x.p99_fct_ns);
    let (olo, ospan) = range(&|x| x.ooo_fraction);
    Some([
        (FlowletPreset::Best, argmin(&|x| x.p99_fct_ns)),
        (
            FlowletPreset::Balanced,
            argmin(&|x| (x.p99_fct_ns - flo) / fspan + (x.ooo_fraction - olo) / ospan),
        ),
        (FlowletPreset::LowestOoo, argmin(&|x| x.ooo_fraction)),
    ])
}

/// Flowlet switching: a flow keeps its port while packets arrive within
/// `timeout` of each other.
#[derive(Debug)]
pub struct FlowletTable {
    timeout: SimTime,
    entries: FxHashMap<FlowKey, (PortId, SimTime)>,
}

impl FlowletTable {
    pub fn new(timeout: SimTime) -> Self {
        FlowletTable { timeout, entries: FxHashMap::default() }
    }

    pub fn route(&mut self, key: &FlowKey, now: SimTime, pick: impl FnOnce() -> PortId) -> PortId {
        match self.entries.get_mut(key) {
            Some((port, last)) if now.saturating_sub(*last) <= self.timeout => {
                *last = now;
                *port
            }
            _ => {
                let port = pick();
                self.entries.insert(*key, (port, now));
                port
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Flowcells: a flow keeps its port for `budget` bytes, then picks again.
#[derive(Debug)]
pub struct FlowcellTable {
    budget: u64,
    entries: FxHashMap<FlowKey, (PortId, u64)>,
}

impl FlowcellTable {
    pub fn new(budget: u64) -> Self {
        FlowcellTable { budget, entries: FxHashMap::default() }
    }

    pub fn route(&mut self, key: &FlowKey, bytes: u64, pick: impl FnOnce() -> PortId) -> PortId {
        match self.entries.get_mut(key) {
            Some((port, used)) if *used + bytes <= self.budget => {
                *used += bytes;
                *port
            }
            _ => {
                let port = pick();
                self.entries.insert(*key, (port, bytes));
                port
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn key(n: u16) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2), n, 4791, 17)
    }

    fn load(port: PortId, bytes: u64) -> PortLoad {
        PortLoad { port, bytes, bandwidth_bps: 200_000_000_000 }
    }

    #[test]
    fn ecmp_is_stable_and_spreads() {
        let k = key(50000);
        assert_eq!(ecmp_index(&k, 7, 8), ecmp_index(&k, 7, 8));
        let mut hits = [0usize; 8];
        for p in 0..8000 {
            hits[ecmp_index(&key(p), 3, 8)] += 1;
        }
        assert!(hits.iter().all(|&h| (800..1200).contains(&h)), "{hits:?}");
    }

    #[test]
    fn least_loaded_picks_idle_port() {
        assert_eq!(least_loaded([load(0, 4096), load(1, 0)]).port, 1);
        assert_eq!(least_loaded([load(3, 10), load(1, 10), load(2, 10)]).port, 1);
    }

    #[test]
    fn least_loaded_accounts_for_bandwidth() {
        let slow = PortLoad { port: 0, bytes: 2048, bandwidth_bps: 20_000_000_000 };
        assert_eq!(least_loaded([slow, load(1, 8192)]).port, 1);
        assert_eq!(slow.drain_time(), 819_200);
    }

    #[test]
    fn ugal_desk_check() {
        // Minimal: 2 hops with 8192 B queued; non-minimal: 4 hops with 1024 B.
        assert!(!ugal_prefers_minimal(8192, 2, 1024, 4));
        assert!(ugal_prefers_minimal(1024, 2, 512, 4));
        assert!(ugal_prefers_minimal(0, 3, 0, 5));
    }

    #[test]
    fn flowlet_gap_rule() {
        let mut t = FlowletTable::new(SimTime::from_micros(1));
        let k = key(1);
        assert_eq!(t.route(&k, SimTime::ZERO, || 2), 2);
        assert_eq!(t.route(&k, SimTime::from_nanos(500), || 5), 2);
        assert_eq!(t.route(&k, SimTime::from_nanos(1400), || 5), 2);
        assert_eq!(t.route(&k, SimTime::from_nanos(2401), || 5), 5);
    }

    #[test]
    fn flowcell_budget_rule() {
        let mut t = FlowcellTable::new(4096);
        let k = key(1);
        assert_eq!(t.route(&k, 2048, || 0), 0);
        assert_eq!(t.route(&k, 2048, || 1), 0);
        assert_eq!(t.route(&k, 2048, || 1), 1);
    }

    #[test]
    fn preset_calibration() {
        let s = |us, fct, ooo| FlowletSample { timeout: SimTime::from_micros(us), p99_fct_ns: fct, ooo_fraction: ooo };
        let presets = calibrate_flowlet_presets(&[s(50, 300.0, 0.0), s(2, 100.0, 0.5), s(10, 150.0, 0.1)]).unwrap();
        assert_eq!(presets[0].1, SimTime::from_micros(2));
        assert_eq!(presets[1].1, SimTime::from_micros(10));
        assert_eq!(presets[2].1, SimTime::from_micros(50));
        assert!(calibrate_flowlet_presets(&[]).is_none());
    }
}
