//! Host-side flow state: sender pause bookkeeping, receiver ordering checks
//! and the NIC-driven flowcut controller.

use std::collections::BTreeSet;

use crate::switch::RttEstimator;
use crate::time::SimTime;

/// Number of packets needed for `size` bytes at the given MTU (at least one).
pub fn packet_count(size: u64, mtu: u32) -> u64 {
    size.div_ceil(mtu as u64).max(1)
}

/// Receiver view of one flow.
///
/// A packet is out of order when its PSN differs from the expected one; the
/// expectation then moves past the larger of the two. The out-of-order
/// degree tracks how far an arriving PSN is from the lowest PSN not yet
/// received.
#[derive(Clone, Debug, Default)]
pub struct Receiver {
    expected: u32,
    lowest_missing: u32,
    above: BTreeSet<u32>,
    pub ooo: u64,
    pub max_ood: u32,
    pub packets: u64,
    pub bytes: u64,
}

impl Receiver {
    /// Record an arrival; returns whether it was in order.
    pub fn on_packet(&mut self, psn: u32, bytes: u64) -> bool {
        self.packets += 1;
        self.bytes += bytes;
        let in_order = psn == self.expected;
        if in_order {
            self.expected += 1;
        } else {
            self.ooo += 1;
            self.expected = self.expected.max(psn + 1);
        }
        if psn == self.lowest_missing {
            self.lowest_missing += 1;
            while self.above.remove(&self.lowest_missing) {
                self.lowest_missing += 1;
            }
        } else if psn > self.lowest_missing {
            self.max_ood = self.max_ood.max(psn - self.lowest_missing);
            self.above.insert(psn);
        }
        in_order
    }
}

/// Pause/resume history of a sender.
#[derive(Clone, Debug, Default)]
pub struct PauseState {
    pub paused: bool,
    since: SimTime,
    pub total: SimTime,
    pub intervals: Vec<(SimTime, SimTime)>,
    /// Incremented on every pause and resume; a resume timer only fires if
    /// the generation it was armed with is still current.
    pub generation: u32,
}

impl PauseState {
    /// Returns false if the flow was already paused.
    pub fn pause(&mut self, now: SimTime) -> bool {
        if self.paused {
            return false;
        }
        self.paused = true;
        self.since = now;
        self.generation = self.generation.wrapping_add(1);
        true
    }

    /// Returns false if the flow was not paused.
    pub fn resume(&mut self, now: SimTime) -> bool {
        if !self.paused {
            return false;
        }
        self.paused = false;
        self.total += now - self.since;
        self.intervals.push((self.since, now));
        self.generation = self.generation.wrapping_add(1);
        true
    }
}

/// Source-side flowcut controller used when switches only run ECMP.
#[derive(Clone, Debug, Default)]
pub struct NicFlowcut {
    pub inflight_bytes: u64,
    pub rtt: RttEstimator,
    pub draining: bool,
}
