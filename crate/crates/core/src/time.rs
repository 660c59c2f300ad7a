//! Simulated time.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

const PS_PER_NS: u64 = 1_000;

/// Simulated time, stored as integer picoseconds.
///
/// Integer time keeps event ordering exact and reproducible; picosecond
/// resolution lets 200 Gb/s serialization delays (40 ps per byte) be
/// represented without rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns * PS_PER_NS)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000_000)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_nanos_f64(self) -> f64 {
        self.0 as f64 / PS_PER_NS as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-12
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    /// Nanoseconds with exactly three decimals, e.g. `1081.920`.
    pub fn fmt_nanos(self) -> String {
        format!("{}.{:03}", self.0 / PS_PER_NS, self.0 % PS_PER_NS)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.fmt_nanos())
    }
}

/// Time to clock `bytes` onto a wire of `bandwidth_bps`, rounded up to the
/// next picosecond.
pub fn serialization_time(bytes: u64, bandwidth_bps: u64) -> SimTime {
    assert!(bandwidth_bps > 0, "link bandwidth must be positive");
    let bits_ps = bytes as u128 * 8 * 1_000_000_000_000u128;
    let bw = bandwidth_bps as u128;
    SimTime(bits_ps.div_ceil(bw) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_at_200g_is_exact() {
        assert_eq!(serialization_time(2048, 200_000_000_000), SimTime::from_ps(81_920));
        assert_eq!(serialization_time(2048, 20_000_000_000), SimTime::from_ps(819_200));
        assert_eq!(serialization_time(0, 200_000_000_000), SimTime::ZERO);
    }

    #[test]
    fn nanosecond_formatting() {
        assert_eq!(SimTime::from_ps(1_081_920).fmt_nanos(), "1081.920");
        assert_eq!(SimTime::ZERO.fmt_nanos(), "0.000");
    }
}
