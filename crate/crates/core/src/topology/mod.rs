//! Fat-tree, Dragonfly and single-switch topologies with precomputed routing
//! candidates.
//!
//! Nodes are numbered hosts first (`0..n_hosts`), then switches. Every cable
//! is represented by two directed links that reference each other through
//! `reverse`. A node's ports are its outgoing links, in a fixed order that
//! routing code relies on for deterministic tie-breaking.

mod dragonfly;
mod export;
mod failures;
mod fat_tree;

use serde::{Deserialize, Serialize};

use crate::packet::HostId;
use crate::time::SimTime;

pub use dragonfly::DragonflyParams;
pub use export::export_edge_list;
pub use failures::FailurePlan;
pub use fat_tree::FatTreeParams;

pub type NodeId = usize;
pub type LinkId = usize;
pub type PortId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Host,
    Tor,
    Aggregation,
    Core,
    Dragonfly,
}

impl Role {
    fn label(self) -> &'static str {
        match self {
            Role::Host => "h",
            Role::Tor => "tor",
            Role::Aggregation => "agg",
            Role::Core => "core",
            Role::Dragonfly => "sw",
        }
    }

    /// Height in a fat tree (hosts 0, cores 3). Dragonfly switches are flat.
    pub fn level(self) -> u8 {
        match self {
            Role::Host => 0,
            Role::Tor | Role::Dragonfly => 1,
            Role::Aggregation => 2,
            Role::Core => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub role: Role,
    /// Outgoing links; the index into this vector is the port id.
    pub ports: Vec<LinkId>,
    /// Pod (fat tree) or group (Dragonfly). Zero for hosts and star.
    pub group: usize,
    /// Position among nodes of the same role, used for labels.
    pub ordinal: usize,
}

#[derive(Clone, Debug)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub from_port: PortId,
    pub to_port: PortId,
    pub bandwidth_bps: u64,
    pub latency: SimTime,
    pub reverse: LinkId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySpec {
    FatTree(FatTreeParams),
    Dragonfly(DragonflyParams),
    Star { hosts: usize },
}

/// Per-switch forwarding state for fat trees: `down` holds one port per
/// child (host, ToR or pod), `up` the upward ports.
#[derive(Clone, Debug, Default)]
pub(crate) struct FtPorts {
    down: Vec<PortId>,
    up: Vec<PortId>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct DfPorts {
    hosts: Vec<PortId>,
    /// Port toward each switch of the own group, indexed by in-group position.
    local: Vec<Option<PortId>>,
    /// Minimal next hops toward each group: global ports if any, otherwise
    /// local ports to the switches owning globals to that group.
    to_group: Vec<Vec<PortId>>,
}

#[derive(Clone, Debug)]
pub(crate) enum Routing {
    FatTree {
        params: FatTreeParams,
        switches: Vec<FtPorts>,
    },
    Dragonfly {
        params: DragonflyParams,
        switches: Vec<DfPorts>,
        /// Switch-to-switch hop distance, indexed by switch index.
        dist: Vec<Vec<u8>>,
    },
    Star,
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub spec: TopologySpec,
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub n_hosts: usize,
    /// For each host: its switch and the switch's port facing the host.
    pub host_attach: Vec<(NodeId, PortId)>,
    /// Forward-direction ids of cables degraded by failure injection.
    pub degraded: Vec<LinkId>,
    pub(crate) routing: Routing,
}

/// Link parameters shared by every cable at build time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkParams {
    pub bandwidth_bps: u64,
    pub latency: SimTime,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { bandwidth_bps: 200_000_000_000, latency: SimTime::from_nanos(1_000) }
    }
}

pub(crate) struct Builder {
    nodes: Vec<Node>,
    links: Vec<Link>,
    params: LinkParams,
}

impl Builder {
    pub(crate) fn new(params: LinkParams) -> Self {
        Builder { nodes: Vec::new(), links: Vec::new(), params }
    }

    pub(crate) fn node(&mut self, role: Role, group: usize, ordinal: usize) -> NodeId {
        self.nodes.push(Node { role, ports: Vec::new(), group, ordinal });
        self.nodes.len() - 1
    }

    /// Add a cable; returns the ports created on `a` and `b`.
    pub(crate) fn connect(&mut self, a: NodeId, b: NodeId) -> (PortId, PortId) {
        let ab = self.links.len();
        let ba = ab + 1;
        let pa = self.nodes[a].ports.len();
        let pb = self.nodes[b].ports.len();
        let LinkParams { bandwidth_bps, latency } = self.params;
        self.links.push(Link { from: a, to: b, from_port: pa, to_port: pb, bandwidth_bps, latency, reverse: ba });
        self.links.push(Link { from: b, to: a, from_port: pb, to_port: pa, bandwidth_bps, latency, reverse: ab });
        self.nodes[a].ports.push(ab);
        self.nodes[b].ports.push(ba);
        (pa, pb)
    }
}

/// Result of a routing lookup at one switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathClass {
    /// Up/down or minimal routing toward the destination.
    Minimal,
    /// Heading to a Dragonfly intermediate group.
    NonMinimal,
}

impl Topology {
    pub fn build(spec: &TopologySpec, link: LinkParams) -> Result<Topology, crate::error::ConfigError> {
        match spec {
            TopologySpec::FatTree(p) => fat_tree::build(p, link),
            TopologySpec::Dragonfly(p) => dragonfly::build(p, link),
            TopologySpec::Star { hosts } => build_star(*hosts, link),
        }
    }

    pub fn n_switches(&self) -> usize {
        self.nodes.len() - self.n_hosts
    }

    pub fn is_host(&self, n: NodeId) -> bool {
        n < self.n_hosts
    }

    pub fn switch_index(&self, n: NodeId) -> usize {
        debug_assert!(n >= self.n_hosts);
        n - self.n_hosts
    }

    pub fn port_link(&self, node: NodeId, port: PortId) -> LinkId {
        self.nodes[node].ports[port]
    }

    /// Link from a host to its switch.
    pub fn host_uplink(&self, h: HostId) -> LinkId {
        self.nodes[h].ports[0]
    }

    pub fn label(&self, n: NodeId) -> String {
        let node = &self.nodes[n];
        format!("{}{}", node.role.label(), node.ordinal)
    }

    /// Directed switch-to-switch links in forward orientation, one per cable.
    pub fn fabric_cables(&self) -> Vec<LinkId> {
        (0..self.links.len())
            .step_by(2)
            .filter(|&l| !self.is_host(self.links[l].from) && !self.is_host(self.links[l].to))
            .collect()
    }

    pub fn is_fabric_link(&self, l: LinkId) -> bool {
        let link = &self.links[l];
        !self.is_host(link.from) && !self.is_host(link.to)
    }

    /// Dragonfly group of a host, or `None` for other topologies.
    pub fn host_group(&self, h: HostId) -> Option<usize> {
        match &self.routing {
            Routing::Dragonfly { .. } => Some(self.nodes[self.host_attach[h].0].group),
            _ => None,
        }
    }

    pub fn n_groups(&self) -> usize {
        match &self.routing {
            Routing::Dragonfly { params, .. } => params.groups,
            _ => 1,
        }
    }

    pub fn is_dragonfly(&self) -> bool {
        matches!(self.routing, Routing::Dragonfly { .. })
    }

    pub fn is_fat_tree(&self) -> bool {
        matches!(self.routing, Routing::FatTree { .. })
    }

    /// Candidate output ports at switch `sw` for a packet to `dst`. On a
    /// Dragonfly, `via_group` (already cleared once the packet entered that
    /// group) selects the intermediate group of a non-minimal route.
    pub fn candidates(&self, sw: NodeId, dst: HostId, via_group: Option<usize>) -> &[PortId] {
        let dst_sw = self.host_attach[dst].0;
        if dst_sw == sw {
            return self.host_port_slice(sw, dst);
        }
        match &self.routing {
            Routing::Star => unreachable!("star has a single switch"),
            Routing::FatTree { params, switches } => {
                let ports = &switches[self.switch_index(sw)];
                let node = &self.nodes[sw];
                match node.role {
                    Role::Tor => &ports.up,
                    Role::Aggregation => {
                        let (pod, tor) = params.locate(dst);
                        if pod == node.group {
                            &ports.down[tor..=tor]
                        } else {
                            &ports.up
                        }
                    }
                    Role::Core => {
                        let (pod, _) = params.locate(dst);
                        &ports.down[pod..=pod]
                    }
                    _ => unreachable!("not a fat-tree switch"),
                }
            }
            Routing::Dragonfly { params, switches, .. } => {
                let ports = &switches[self.switch_index(sw)];
                let here = self.nodes[sw].group;
                let target = via_group.unwrap_or(self.nodes[dst_sw].group);
                if target == here {
                    let pos = self.nodes[dst_sw].ordinal % params.switches_per_group;
                    let p = ports.local[pos].as_ref().expect("local mesh port");
                    std::slice::from_ref(p)
                } else {
                    &ports.to_group[target]
                }
            }
        }
    }

    fn host_port_slice(&self, sw: NodeId, dst: HostId) -> &[PortId] {
        match &self.routing {
            Routing::Star => {
                std::slice::from_ref(&self.host_attach[dst].1)
            }
            Routing::FatTree { params, switches } => {
                let local = dst % params.hosts_per_tor;
                &switches[self.switch_index(sw)].down[local..=local]
            }
            Routing::Dragonfly { params, switches, .. } => {
                let local = dst % params.hosts_per_switch;
                &switches[self.switch_index(sw)].hosts[local..=local]
            }
        }
    }

    /// Whether `port` on `sw` faces a host.
    pub fn is_host_port(&self, sw: NodeId, port: PortId) -> bool {
        self.is_host(self.links[self.nodes[sw].ports[port]].to)
    }

    /// Switch-to-switch hops on a minimal route between two switches.
    pub fn switch_distance(&self, a: NodeId, b: NodeId) -> usize {
        match &self.routing {
            Routing::Dragonfly { dist, .. } => dist[self.switch_index(a)][self.switch_index(b)] as usize,
            Routing::Star => 0,
            Routing::FatTree { .. } => {
                if a == b {
                    return 0;
                }
                let (na, nb) = (&self.nodes[a], &self.nodes[b]);
                // Both endpoints of interest are ToRs.
                if na.group == nb.group {
                    2
                } else {
                    4
                }
            }
        }
    }

    /// Hops of the shortest route from switch `a` to switch `b` that passes
    /// through group `via` (Dragonfly only).
    pub fn distance_via_group(&self, a: NodeId, via: usize, b: NodeId) -> usize {
        match &self.routing {
            Routing::Dragonfly { params, dist, .. } => {
                let (ia, ib) = (self.switch_index(a), self.switch_index(b));
                let base = via * params.switches_per_group;
                (base..base + params.switches_per_group)
                    .map(|x| dist[ia][x] as usize + dist[x][ib] as usize)
                    .min()
                    .unwrap_or(0)
            }
            _ => self.switch_distance(a, b),
        }
    }

    /// Apply a failure plan in place. See [`FailurePlan`].
    pub fn inject_failures(&mut self, plan: &FailurePlan) -> Result<(), crate::error::ConfigError> {
        failures::inject(self, plan)
    }

    /// Round-trip propagation delay over the longest minimal route between
    /// two hosts.
    pub fn base_rtt(&self) -> SimTime {
        // Longest minimal route: hosts plus switch hops, both directions.
        let hops = match &self.routing {
            Routing::Star => 2,
            Routing::FatTree { .. } => 6,
            Routing::Dragonfly { .. } => 5,
        };
        let lat = self.links.iter().map(|l| l.latency).max().unwrap_or(SimTime::ZERO);
        SimTime(2 * hops * lat.0)
    }
}

fn build_star(hosts: usize, link: LinkParams) -> Result<Topology, crate::error::ConfigError> {
    if hosts < 2 {
        return Err(crate::error::ConfigError::Topology(format!(
            "star needs at least 2 hosts, got {hosts}"
        )));
    }
    let mut b = Builder::new(link);
    for h in 0..hosts {
        b.node(Role::Host, 0, h);
    }
    let sw = b.node(Role::Tor, 0, 0);
    let mut host_attach = Vec::with_capacity(hosts);
    for h in 0..hosts {
        let (_, sp) = b.connect(h, sw);
        host_attach.push((sw, sp));
    }
    Ok(Topology {
        spec: TopologySpec::Star { hosts },
        nodes: b.nodes,
        links: b.links,
        n_hosts: hosts,
        host_attach,
        degraded: Vec::new(),
        routing: Routing::Star,
    })
}
