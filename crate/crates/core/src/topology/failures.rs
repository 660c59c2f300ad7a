use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::ConfigError;

use super::Topology;

/// Degrade a seeded random subset of switch-to-switch cables.
///
/// `ceil(fraction * cables)` cables are chosen uniformly without
/// replacement; both directions of each have their bandwidth divided by
/// `degrade_factor`. Host links are never touched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailurePlan {
    pub seed: u64,
    pub fraction: f64,
    pub degrade_factor: f64,
}

impl FailurePlan {
    pub fn none() -> Self {
        FailurePlan { seed: 0, fraction: 0.0, degrade_factor: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(ConfigError::Failures(format!("fraction {} is outside [0, 1]", self.fraction)));
        }
        if !(self.degrade_factor >= 1.0) || !self.degrade_factor.is_finite() {
            return Err(ConfigError::Failures(format!(
                "degrade_factor {} must be a finite value >= 1",
                self.degrade_factor
            )));
        }
        Ok(())
    }

    pub fn affected_count(&self, cables: usize) -> usize {
        ((self.fraction * cables as f64).ceil() as usize).min(cables)
    }
}

pub(super) fn inject(t: &mut Topology, plan: &FailurePlan) -> Result<(), ConfigError> {
    plan.validate()?;
    let cables = t.fabric_cables();
    let k = plan.affected_count(cables.len());
    if k == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut chosen: Vec<_> = sample(&mut rng, cables.len(), k).into_iter().map(|i| cables[i]).collect();
    chosen.sort_unstable();
    for &l in &chosen {
        let rev = t.links[l].reverse;
        for id in [l, rev] {
            let bw = t.links[id].bandwidth_bps as f64 / plan.degrade_factor;
            t.links[id].bandwidth_bps = (bw.round() as u64).max(1);
        }
    }
    t.degraded.extend(chosen);
    t.degraded.sort_unstable();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::serialization_time;
    use crate::topology::{FatTreeParams, LinkParams, TopologySpec};

    fn desk() -> Topology {
        let spec = TopologySpec::FatTree(FatTreeParams { pods: 4, tors_per_pod: 4, hosts_per_tor: 8, taper: 1 });
        Topology::build(&spec, LinkParams::default()).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let mut t = desk();
        let before: Vec<_> = t.links.iter().map(|l| l.bandwidth_bps).collect();
        t.inject_failures(&FailurePlan { seed: 3, fraction: 0.0, degrade_factor: 10.0 }).unwrap();
        let after: Vec<_> = t.links.iter().map(|l| l.bandwidth_bps).collect();
        assert_eq!(before, after);
        assert!(t.degraded.is_empty());
    }

    #[test]
    fn one_percent_degraded_to_20g() {
        let mut t = desk();
        let plan = FailurePlan { seed: 11, fraction: 0.01, degrade_factor: 10.0 };
        t.inject_failures(&plan).unwrap();
        let n = t.fabric_cables().len();
        assert_eq!(t.degraded.len(), (n as f64 * 0.01).ceil() as usize);
        for &l in &t.degraded {
            assert!(t.is_fabric_link(l));
            assert_eq!(t.links[l].bandwidth_bps, 20_000_000_000);
            assert_eq!(t.links[t.links[l].reverse].bandwidth_bps, 20_000_000_000);
            assert_eq!(serialization_time(2048, t.links[l].bandwidth_bps).as_ps(), 819_200);
        }
        let slow = t.links.iter().filter(|l| l.bandwidth_bps < 200_000_000_000).count();
        assert_eq!(slow, 2 * t.degraded.len());
    }

    #[test]
    fn same_seed_same_links() {
        let plan = FailurePlan { seed: 42, fraction: 0.1, degrade_factor: 10.0 };
        let mut a = desk();
        let mut b = desk();
        a.inject_failures(&plan).unwrap();
        b.inject_failures(&plan).unwrap();
        assert_eq!(a.degraded, b.degraded);
        let mut c = desk();
        c.inject_failures(&FailurePlan { seed: 43, ..plan }).unwrap();
        assert_ne!(a.degraded, c.degraded);
    }

    #[test]
    fn invalid_plans_rejected() {
        let mut t = desk();
        assert!(t.inject_failures(&FailurePlan { seed: 0, fraction: 1.5, degrade_factor: 2.0 }).is_err());
        assert!(t.inject_failures(&FailurePlan { seed: 0, fraction: 0.1, degrade_factor: 0.5 }).is_err());
    }
}
