use std::collections::VecDeque;

use crate::error::ConfigError;

use super::{Builder, DfPorts, LinkParams, Role, Routing, Topology, TopologySpec};

/// Dragonfly with fully connected groups.
///
/// Global cables for each group pair are handed out round-robin over the
/// switches of each group, so the cables of one group are spread as evenly
/// as possible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DragonflyParams {
    pub groups: usize,
    pub switches_per_group: usize,
    pub hosts_per_switch: usize,
    pub global_links_per_group_pair: usize,
    pub radix: usize,
}

impl DragonflyParams {
    pub const DEFAULT_RADIX: usize = 64;

    pub fn n_hosts(&self) -> usize {
        self.groups * self.switches_per_group * self.hosts_per_switch
    }

    /// Ports needed by the busiest switch.
    pub fn ports_needed(&self) -> usize {
        let globals = self.global_links_per_group_pair * (self.groups - 1);
        self.hosts_per_switch + (self.switches_per_group - 1) + globals.div_ceil(self.switches_per_group)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Topology(m));
        if self.groups < 2 {
            return bad(format!("dragonfly needs at least 2 groups, got {}", self.groups));
        }
        if self.switches_per_group == 0 || self.hosts_per_switch == 0 {
            return bad("dragonfly needs at least one switch per group and one host per switch".into());
        }
        if self.global_links_per_group_pair == 0 {
            return bad("every group pair needs at least one global link".into());
        }
        if self.ports_needed() > self.radix {
            return bad(format!(
                "switch radix {} is too small: {} host + {} local + {} global ports needed",
                self.radix,
                self.hosts_per_switch,
                self.switches_per_group - 1,
                (self.global_links_per_group_pair * (self.groups - 1)).div_ceil(self.switches_per_group)
            ));
        }
        Ok(())
    }
}

pub(super) fn build(p: &DragonflyParams, link: LinkParams) -> Result<Topology, ConfigError> {
    p.validate()?;
    let (g, a, hps) = (p.groups, p.switches_per_group, p.hosts_per_switch);
    let n_hosts = p.n_hosts();
    let n_sw = g * a;
    let mut b = Builder::new(link);
    for h in 0..n_hosts {
        b.node(Role::Host, h / (a * hps), h);
    }
    let sws: Vec<_> = (0..n_sw).map(|s| b.node(Role::Dragonfly, s / a, s)).collect();
    let mut ports = vec![
        DfPorts { hosts: Vec::new(), local: vec![None; a], to_group: vec![Vec::new(); g] };
        n_sw
    ];
    let mut host_attach = Vec::with_capacity(n_hosts);
    for h in 0..n_hosts {
        let s = h / hps;
        let (_, sp) = b.connect(h, sws[s]);
        ports[s].hosts.push(sp);
        host_attach.push((sws[s], sp));
    }
    for grp in 0..g {
        for i in 0..a {
            for j in i + 1..a {
                let (si, sj) = (grp * a + i, grp * a + j);
                let (pi, pj) = b.connect(sws[si], sws[sj]);
                ports[si].local[j] = Some(pi);
                ports[sj].local[i] = Some(pj);
            }
        }
    }
    let mut next = vec![0usize; g];
    let mut global: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); g]; n_sw];
    for g1 in 0..g {
        for g2 in g1 + 1..g {
            for _ in 0..p.global_links_per_group_pair {
                let s1 = g1 * a + next[g1] % a;
                let s2 = g2 * a + next[g2] % a;
                next[g1] += 1;
                next[g2] += 1;
                let (p1, p2) = b.connect(sws[s1], sws[s2]);
                global[s1][g2].push(p1);
                global[s2][g1].push(p2);
            }
        }
    }
    for s in 0..n_sw {
        let grp = s / a;
        for tg in 0..g {
            if tg == grp {
                continue;
            }
            ports[s].to_group[tg] = if !global[s][tg].is_empty() {
                global[s][tg].clone()
            } else {
                (0..a)
                    .filter(|&j| !global[grp * a + j][tg].is_empty())
                    .map(|j| ports[s].local[j].expect("mesh"))
                    .collect()
            };
        }
    }

    let nodes = b.nodes;
    let links = b.links;
    let mut dist = vec![vec![u8::MAX; n_sw]; n_sw];
    for (src, row) in dist.iter_mut().enumerate() {
        row[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for &l in &nodes[n_hosts + u].ports {
                let v = links[l].to;
                if v < n_hosts {
                    continue;
                }
                let v = v - n_hosts;
                if row[v] == u8::MAX {
                    row[v] = row[u] + 1;
                    q.push_back(v);
                }
            }
        }
    }

    Ok(Topology {
        spec: TopologySpec::Dragonfly(*p),
        nodes,
        links,
        n_hosts,
        host_attach,
        degraded: Vec::new(),
        routing: Routing::Dragonfly { params: *p, switches: ports, dist },
    })
}
