use crate::error::ConfigError;
use crate::packet::HostId;

use super::{Builder, FtPorts, LinkParams, Role, Routing, Topology, TopologySpec};

/// Three-level fat tree.
///
/// Each pod has `tors_per_pod` ToRs and `hosts_per_tor / taper`
/// aggregation switches; every ToR connects to every aggregation switch of
/// its pod. Each aggregation switch has one uplink per ToR in its pod, and
/// core switch `(a, j)` connects to aggregation switch `a` of every pod.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FatTreeParams {
    pub pods: usize,
    pub tors_per_pod: usize,
    pub hosts_per_tor: usize,
    /// Oversubscription at the ToR: 1 for 1:1, 2 for 2:1.
    pub taper: usize,
}

impl FatTreeParams {
    pub fn aggs_per_pod(&self) -> usize {
        self.hosts_per_tor / self.taper
    }

    pub fn n_hosts(&self) -> usize {
        self.pods * self.tors_per_pod * self.hosts_per_tor
    }

    pub fn n_tors(&self) -> usize {
        self.pods * self.tors_per_pod
    }

    pub fn n_aggs(&self) -> usize {
        self.pods * self.aggs_per_pod()
    }

    pub fn n_cores(&self) -> usize {
        self.aggs_per_pod() * self.tors_per_pod
    }

    /// (pod, ToR index within the pod) of a host.
    pub fn locate(&self, h: HostId) -> (usize, usize) {
        let tor = h / self.hosts_per_tor;
        (tor / self.tors_per_pod, tor % self.tors_per_pod)
    }

    /// Global ToR index of a host.
    pub fn tor_of(&self, h: HostId) -> usize {
        h / self.hosts_per_tor
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Topology(m));
        if self.pods == 0 || self.tors_per_pod == 0 || self.hosts_per_tor == 0 {
            return bad("fat tree needs at least one pod, ToR and host per ToR".into());
        }
        if self.taper == 0 {
            return bad("taper must be at least 1".into());
        }
        if !self.hosts_per_tor.is_multiple_of(self.taper) {
            return bad(format!(
                "hosts_per_tor {} is not divisible by taper {}: ToRs would need a fractional number of uplinks",
                self.hosts_per_tor, self.taper
            ));
        }
        if self.n_hosts() < 2 {
            return bad("fat tree needs at least 2 hosts".into());
        }
        Ok(())
    }
}

pub(super) fn build(p: &FatTreeParams, link: LinkParams) -> Result<Topology, ConfigError> {
    p.validate()?;
    let (n_hosts, a_per_pod, t_per_pod) = (p.n_hosts(), p.aggs_per_pod(), p.tors_per_pod);
    let mut b = Builder::new(link);
    for h in 0..n_hosts {
        b.node(Role::Host, p.locate(h).0, h);
    }
    let tors: Vec<_> = (0..p.n_tors()).map(|t| b.node(Role::Tor, t / t_per_pod, t)).collect();
    let aggs: Vec<_> = (0..p.n_aggs()).map(|a| b.node(Role::Aggregation, a / a_per_pod, a)).collect();
    let cores: Vec<_> = (0..p.n_cores()).map(|c| b.node(Role::Core, 0, c)).collect();

    let n_sw = tors.len() + aggs.len() + cores.len();
    let mut sw = vec![FtPorts::default(); n_sw];
    let mut host_attach = Vec::with_capacity(n_hosts);
    for h in 0..n_hosts {
        let tor = tors[p.tor_of(h)];
        let (_, tp) = b.connect(h, tor);
        sw[tor - n_hosts].down.push(tp);
        host_attach.push((tor, tp));
    }
    for pod in 0..p.pods {
        for t in 0..t_per_pod {
            let tor = tors[pod * t_per_pod + t];
            for a in 0..a_per_pod {
                let agg = aggs[pod * a_per_pod + a];
                let (tp, ap) = b.connect(tor, agg);
                sw[tor - n_hosts].up.push(tp);
                sw[agg - n_hosts].down.push(ap);
            }
        }
    }
    for pod in 0..p.pods {
        for a in 0..a_per_pod {
            let agg = aggs[pod * a_per_pod + a];
            for j in 0..t_per_pod {
                let core = cores[a * t_per_pod + j];
                let (ap, cp) = b.connect(agg, core);
                sw[agg - n_hosts].up.push(ap);
                sw[core - n_hosts].down.push(cp);
            }
        }
    }
    Ok(Topology {
        spec: TopologySpec::FatTree(*p),
        nodes: b.nodes,
        links: b.links,
        n_hosts,
        host_attach,
        degraded: Vec::new(),
        routing: Routing::FatTree { params: *p, switches: sw },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::tests::all_paths;

    fn count(t: &Topology, role: Role) -> usize {
        t.nodes.iter().filter(|n| n.role == role).count()
    }

    #[test]
    fn full_scale_switch_counts() {
        let p = FatTreeParams { pods: 16, tors_per_pod: 8, hosts_per_tor: 8, taper: 1 };
        let t = build(&p, LinkParams::default()).unwrap();
        assert_eq!(t.n_hosts, 1024);
        assert_eq!(count(&t, Role::Tor), 128);
        assert_eq!(count(&t, Role::Aggregation), 128);
        assert_eq!(count(&t, Role::Core), 64);
    }

    #[test]
    fn desk_scale_all_pairs_reachable_up_down() {
        let p = FatTreeParams { pods: 4, tors_per_pod: 4, hosts_per_tor: 8, taper: 1 };
        let t = build(&p, LinkParams::default()).unwrap();
        assert_eq!(t.n_hosts, 128);
        for s in 0..t.n_hosts {
            for d in (0..t.n_hosts).step_by(7) {
                if s == d {
                    continue;
                }
                let paths = all_paths(&t, s, d, None);
                assert!(!paths.is_empty());
                for path in paths {
                    let levels: Vec<u8> = path.iter().map(|&n| t.nodes[n].role.level()).collect();
                    let peak = levels.iter().position(|&l| l == *levels.iter().max().unwrap()).unwrap();
                    assert!(levels[..=peak].windows(2).all(|w| w[0] < w[1]), "{levels:?}");
                    assert!(levels[peak..].windows(2).all(|w| w[0] > w[1]), "{levels:?}");
                }
            }
        }
    }

    #[test]
    fn path_diversity() {
        let p = FatTreeParams { pods: 4, tors_per_pod: 4, hosts_per_tor: 8, taper: 1 };
        let t = build(&p, LinkParams::default()).unwrap();
        // Same ToR, same pod, other pod.
        assert_eq!(all_paths(&t, 0, 1, None).len(), 1);
        assert_eq!(all_paths(&t, 0, 8, None).len(), 8);
        assert_eq!(all_paths(&t, 0, 40, None).len(), 8 * 4);
    }

    #[test]
    fn taper_halves_tor_uplinks() {
        let full = FatTreeParams { pods: 4, tors_per_pod: 4, hosts_per_tor: 8, taper: 1 };
        let half = FatTreeParams { taper: 2, ..full };
        let up = |p: &FatTreeParams| {
            let t = build(p, LinkParams::default()).unwrap();
            let tor = t.host_attach[0].0;
            t.nodes[tor].ports.len() - p.hosts_per_tor
        };
        assert_eq!(up(&full), 8);
        assert_eq!(up(&half), 4);
    }

    #[test]
    fn unrealizable_taper_is_rejected() {
        let p = FatTreeParams { pods: 4, tors_per_pod: 4, hosts_per_tor: 3, taper: 2 };
        let err = build(&p, LinkParams::default()).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }
}
