//! The event loop: links, output queues, credits, switches and hosts.
//!
//! Each directed link has an output port at its upstream node: a control
//! FIFO served with strict priority, then one data FIFO per virtual channel,
//! served round-robin. The virtual channel of a data packet on a fabric link
//! is its hop count, which only grows along a path, so buffer dependencies
//! are acyclic and credit flow control cannot deadlock. Links into hosts use
//! a single channel because hosts always accept data.
//!
//! Credits are per link and channel. The upstream consumes credits when it
//! starts transmitting a data packet and gets them back as soon as the
//! downstream node dequeues the packet for its next hop (or a host receives
//! it). Control frames (ACKs, XOFF/XON, NIC ACKs) are small and do not use
//! credits.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::engine::EventQueue;
use crate::error::{ConfigError, SimError};
use crate::host::{NicFlowcut, PauseState, Receiver};
use crate::metrics::{aggregate, Counters, FabricCounters, FlowRecord, RunReport, SwitchStats, Timeline};
use crate::packet::{
    host_addr, mix64, Ack, FlowId, FlowKey, Frame, HostId, NicAck, Packet, Signal, SignalKind, FLOWCUT_HEADER_BYTES,
    MAX_HOP_COUNT, PROTO_UDP, ROCE_UDP_PORT,
};
use crate::routing::{ecmp_index, least_loaded_random, ugal_prefers_minimal, FlowcellTable, FlowletTable, Policy, PortLoad};
use crate::switch::{
    evaluate_drain, normalized_rtt, Charge, CongestionParams, DrainDecision, DrainState, FlowcutEntry, FlowcutTable,
    QueuedPacket, TransitEntry,
};
use crate::time::{serialization_time, SimTime};
use crate::topology::{LinkId, NodeId, PortId, Topology};
use crate::trace::{check_ack_reverse_path, check_single_path, check_up_down, TraceEvent, TraceKind};
use crate::workload::{FlowSpec, FlowStart};

pub const NUM_VCS: usize = MAX_HOP_COUNT as usize + 1;
const FIRST_SRC_PORT: u16 = 49152;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResumeTimeout {
    /// Ten times the fabric's base round-trip time.
    Auto,
    Disabled,
    After(SimTime),
}

/// Run parameters independent of topology and workload.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub policy: Policy,
    pub congestion: CongestionParams,
    pub flowlet_timeout: SimTime,
    pub flowcell_bytes: u64,
    /// Partial-resume mode: maximum receiver out-of-order degree.
    pub ood_bound: Option<u32>,
    pub mtu: u32,
    pub buffer_bytes: u32,
    pub table_capacity: usize,
    pub resume_timeout: ResumeTimeout,
    pub xon_loss: f64,
    pub ack_loss: f64,
    pub timeline_bucket: SimTime,
    pub seed: u64,
    pub check_invariants: bool,
    pub trace: bool,
}

impl SimParams {
    pub fn new(policy: Policy, bandwidth_bps: u64) -> Self {
        SimParams {
            policy,
            congestion: CongestionParams::for_bandwidth(bandwidth_bps),
            flowlet_timeout: crate::routing::FlowletPreset::Balanced.default_timeout(),
            flowcell_bytes: 64 * 1024,
            ood_bound: None,
            mtu: 2048,
            buffer_bytes: 64 * 1024,
            table_capacity: 64 * 1024,
            resume_timeout: ResumeTimeout::Auto,
            xon_loss: 0.0,
            ack_loss: 0.0,
            timeline_bucket: SimTime::from_micros(10),
            seed: 1,
            check_invariants: false,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.congestion.validate()?;
        if self.mtu == 0 {
            return bad("mtu must be positive".into());
        }
        if (self.buffer_bytes as u64) < (self.mtu + FLOWCUT_HEADER_BYTES) as u64 {
            return bad(format!("buffer_bytes {} cannot hold one {}-byte packet", self.buffer_bytes, self.mtu));
        }
        if self.table_capacity == 0 {
            return bad("table_capacity must be positive".into());
        }
        if self.flowcell_bytes == 0 {
            return bad("flowcell_bytes must be positive".into());
        }
        for (name, p) in [("xon_loss", self.xon_loss), ("ack_loss", self.ack_loss)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} is not a probability"));
            }
        }
        if self.timeline_bucket == SimTime::ZERO {
            return bad("timeline bucket must be positive".into());
        }
        if self.ood_bound.is_some() && self.policy != Policy::Flowcut {
            return Err(ConfigError::Routing("ood_bound (partial resume) requires the flowcut policy".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Ev {
    Arrive(LinkId),
    TxDone(LinkId),
    Start(FlowId),
    ResumeTimeout(FlowId, u32),
}

#[derive(Debug)]
struct WireFrame {
    frame: Frame,
    vc: u8,
    /// Credits consumed on this link (0 for control frames).
    charged: u32,
}

#[derive(Debug, Default)]
struct Port {
    busy: bool,
    ctrl: VecDeque<Frame>,
    data: [VecDeque<QueuedPacket>; NUM_VCS],
    /// Bitmask of channels with queued data.
    nonempty: u32,
    queued_bytes: u64,
    in_service: u32,
    rr: usize,
    credits: [u32; NUM_VCS],
    wire: VecDeque<WireFrame>,
}

struct SwitchState {
    table: FlowcutTable,
    flowlet: FlowletTable,
    flowcell: FlowcellTable,
}

#[derive(Default)]
struct HostState {
    ready: VecDeque<FlowId>,
    active_flows: usize,
    nic_floor: crate::switch::RttFloorTable,
}

struct FlowState {
    spec: FlowSpec,
    key: FlowKey,
    key_hash: u64,
    dependents: Vec<FlowId>,
    start: Option<SimTime>,
    end: Option<SimTime>,
    next_psn: u32,
    sent: u64,
    in_ready: bool,
    pause: PauseState,
    drains: u32,
    reroutes: u32,
    flowcuts: u32,
    rx: Receiver,
    nic: NicFlowcut,
}

fn next_cut(fs: &mut FlowState) -> u32 {
    fs.flowcuts += 1;
    fs.flowcuts - 1
}

impl FlowState {
    fn remaining(&self) -> u64 {
        self.spec.size - self.sent
    }
}

/// Everything a run produces.
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Option<Vec<TraceEvent>>,
    pub topology: Topology,
}

pub struct Network {
    topo: Topology,
    p: SimParams,
    resume_after: Option<SimTime>,
    q: EventQueue<Ev>,
    ports: Vec<Port>,
    switches: Vec<SwitchState>,
    hosts: Vec<HostState>,
    flows: Vec<FlowState>,
    rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    completed: usize,
    timeline: Timeline,
    fabric: FabricCounters,
    counters: Counters,
    trace: Option<Vec<TraceEvent>>,
}

fn host_of_addr(addr: std::net::Ipv4Addr) -> HostId {
    (u32::from(addr) & 0x00ff_ffff) as HostId
}

impl Network {
    pub fn new(topo: Topology, specs: Vec<FlowSpec>, p: SimParams) -> Result<Network, ConfigError> {
        p.validate()?;
        if p.policy.requires_dragonfly() && !topo.is_dragonfly() {
            return Err(ConfigError::Routing(format!("policy `{}` needs a dragonfly topology", p.policy.name())));
        }
        let n = topo.n_hosts;
        let mut next_port = vec![0u16; n];
        let mut flows = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if s.src >= n || s.dst >= n {
                return Err(ConfigError::Workload(format!("flow {i}: host out of range (topology has {n} hosts)")));
            }
            if s.src == s.dst {
                return Err(ConfigError::Workload(format!("flow {i}: source and destination are both host {}", s.src)));
            }
            if let FlowStart::After(pred) = s.start {
                if pred >= i {
                    return Err(ConfigError::Workload(format!("flow {i}: must start after an earlier flow, got {pred}")));
                }
            }
            let port = FIRST_SRC_PORT + next_port[s.src] % (u16::MAX - FIRST_SRC_PORT + 1);
            next_port[s.src] = next_port[s.src].wrapping_add(1);
            let key = FlowKey::new(host_addr(s.src), host_addr(s.dst), port, ROCE_UDP_PORT, PROTO_UDP);
            flows.push(FlowState {
                spec: s.clone(),
                key,
                key_hash: key.hash64(),
                dependents: Vec::new(),
                start: None,
                end: None,
                next_psn: 0,
                sent: 0,
                in_ready: false,
                pause: PauseState::default(),
                drains: 0,
                reroutes: 0,
                flowcuts: 0,
                rx: Receiver::default(),
                nic: NicFlowcut::default(),
            });
        }
        for (i, s) in specs.iter().enumerate() {
            if let FlowStart::After(pred) = s.start {
                flows[pred].dependents.push(i);
            }
        }
        let ports = (0..topo.links.len())
            .map(|_| Port { credits: [p.buffer_bytes; NUM_VCS], ..Port::default() })
            .collect();
        let switches = (0..topo.n_switches())
            .map(|_| SwitchState {
                table: FlowcutTable::new(p.table_capacity),
                flowlet: FlowletTable::new(p.flowlet_timeout),
                flowcell: FlowcellTable::new(p.flowcell_bytes),
            })
            .collect();
        let resume_after = match p.resume_timeout {
            ResumeTimeout::Auto => Some(SimTime(topo.base_rtt().as_ps() * 10)),
            ResumeTimeout::Disabled => None,
            ResumeTimeout::After(t) => Some(t),
        };
        Ok(Network {
            hosts: (0..n).map(|_| HostState::default()).collect(),
            rng: ChaCha8Rng::seed_from_u64(mix64(p.seed ^ 0x5eed_0001)),
            fault_rng: ChaCha8Rng::seed_from_u64(mix64(p.seed ^ 0x5eed_0002)),
            timeline: Timeline::new(p.timeline_bucket),
            trace: p.trace.then(Vec::new),
            q: EventQueue::new(),
            completed: 0,
            fabric: FabricCounters::default(),
            counters: Counters::default(),
            resume_after,
            topo,
            p,
            ports,
            switches,
            flows,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Run until every flow has finished. An empty event queue with
    /// unfinished flows is a deadlock.
    pub fn run(mut self) -> Result<RunOutput, SimError> {
        for i in 0..self.flows.len() {
            if let FlowStart::At(t) = self.flows[i].spec.start {
                self.q.schedule(t, Ev::Start(i))?;
            }
        }
        while let Some(ev) = self.q.pop() {
            match ev.payload {
                Ev::Arrive(l) => self.on_arrive(l)?,
                Ev::TxDone(l) => {
                    let port = &mut self.ports[l];
                    port.busy = false;
                    port.in_service = 0;
                    self.try_send(l)?;
                }
                Ev::Start(f) => self.start_flow(f)?,
                Ev::ResumeTimeout(f, generation) => {
                    let fs = &self.flows[f];
                    if fs.pause.paused && fs.pause.generation == generation {
                        self.counters.resume_timeouts += 1;
                        self.resume_flow(f)?;
                    }
                }
            }
            if self.p.check_invariants {
                self.check_invariants()?;
            }
        }
        if self.completed < self.flows.len() {
            return Err(self.deadlock());
        }
        self.check_trace()?;
        Ok(self.finish())
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn deadlock(&self) -> SimError {
        let unfinished: Vec<_> = (0..self.flows.len()).filter(|&f| self.flows[f].end.is_none()).collect();
        let paused: Vec<_> = unfinished.iter().copied().filter(|&f| self.flows[f].pause.paused).collect();
        let show = |v: &[FlowId]| {
            let mut s = v.iter().take(8).map(|f| f.to_string()).collect::<Vec<_>>().join(", ");
            if v.len() > 8 {
                s.push_str(", ...");
            }
            s
        };
        SimError::Deadlock {
            time: self.now(),
            incomplete: unfinished.len(),
            diagnostic: format!(
                "{} paused flow(s) [{}]; unfinished flows [{}]",
                paused.len(),
                show(&paused),
                show(&unfinished)
            ),
        }
    }

    fn record(&mut self, flow: FlowId, psn: u32, node: NodeId, port: PortId, kind: TraceKind, flowcut: u32) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEvent {
                time: self.q.now(),
                flow,
                key_hash: self.flows[flow].key_hash,
                psn,
                node,
                port,
                kind,
                flowcut,
            });
        }
    }

    // ----- links -------------------------------------------------------

    fn try_send(&mut self, link: LinkId) -> Result<(), SimError> {
        if self.ports[link].busy {
            return Ok(());
        }
        if let Some(frame) = self.ports[link].ctrl.pop_front() {
            return self.transmit(link, frame, 0, 0);
        }
        let from = self.topo.links[link].from;
        if self.topo.is_host(from) {
            if let Some(p) = self.host_next_packet(from) {
                let w = p.wire_size();
                self.transmit(link, Frame::Data(p), 0, w)?;
            }
            return Ok(());
        }
        if let Some((qp, vc)) = self.pop_data(link) {
            let w = qp.packet.wire_size();
            self.transmit(link, Frame::Data(qp.packet), vc, w)?;
            if let Some(c) = qp.charge {
                self.return_credit(c)?;
            }
        }
        Ok(())
    }

    fn pop_data(&mut self, link: LinkId) -> Option<(QueuedPacket, u8)> {
        let port = &mut self.ports[link];
        if port.nonempty == 0 {
            return None;
        }
        for i in 0..NUM_VCS {
            let vc = (port.rr + i) % NUM_VCS;
            if port.nonempty & (1 << vc) == 0 {
                continue;
            }
            let w = port.data[vc].front().expect("nonempty bit").packet.wire_size();
            if port.credits[vc] >= w {
                let qp = port.data[vc].pop_front().expect("nonempty");
                if port.data[vc].is_empty() {
                    port.nonempty &= !(1 << vc);
                }
                port.rr = (vc + 1) % NUM_VCS;
                port.queued_bytes -= w as u64;
                return Some((qp, vc as u8));
            }
        }
        None
    }

    fn transmit(&mut self, link: LinkId, frame: Frame, vc: u8, charged: u32) -> Result<(), SimError> {
        let now = self.now();
        let l = &self.topo.links[link];
        let (bw, lat) = (l.bandwidth_bps, l.latency);
        let w = frame.wire_size();
        let port = &mut self.ports[link];
        debug_assert!(!port.busy);
        if charged > 0 {
            let c = &mut port.credits[vc as usize];
            if *c < charged {
                return Err(SimError::Invariant { time: now, what: format!("link {link} vc {vc}: credits overdrawn") });
            }
            *c -= charged;
        }
        port.busy = true;
        port.in_service = if frame.is_data() { w } else { 0 };
        if self.topo.is_fabric_link(link) {
            match &frame {
                Frame::Data(p) => {
                    self.fabric.data_wire_bytes += w as u64;
                    self.fabric.data_payload_bytes += p.size as u64;
                }
                Frame::Ack(_) => self.fabric.ack_bytes += w as u64,
                Frame::NicAck(_) => self.fabric.nic_ack_bytes += w as u64,
                Frame::Signal(_) => self.fabric.signal_bytes += w as u64,
            }
        }
        let ser = serialization_time(w as u64, bw);
        port.wire.push_back(WireFrame { frame, vc, charged });
        self.q.schedule(now + ser, Ev::TxDone(link))?;
        self.q.schedule(now + ser + lat, Ev::Arrive(link))?;
        Ok(())
    }

    fn return_credit(&mut self, c: Charge) -> Result<(), SimError> {
        self.ports[c.link].credits[c.vc as usize] += c.bytes;
        self.try_send(c.link)
    }

    fn on_arrive(&mut self, link: LinkId) -> Result<(), SimError> {
        let wf = self.ports[link].wire.pop_front().expect("arrival without frame on wire");
        let to = self.topo.links[link].to;
        if self.topo.is_host(to) {
            self.host_receive(to, link, wf)
        } else {
            self.switch_receive(to, link, wf)
        }
    }

    fn enqueue_ctrl(&mut self, sw: NodeId, port: PortId, frame: Frame) -> Result<(), SimError> {
        let link = self.topo.nodes[sw].ports[port];
        self.ports[link].ctrl.push_back(frame);
        self.try_send(link)
    }

    // ----- switches ----------------------------------------------------

    fn switch_receive(&mut self, sw: NodeId, link: LinkId, wf: WireFrame) -> Result<(), SimError> {
        let in_port = self.topo.links[link].to_port;
        match wf.frame {
            Frame::Data(mut p) => {
                p.hop_count += 1;
                if p.hop_count > MAX_HOP_COUNT {
                    return Err(SimError::HopCountOverflow(p.hop_count as u32));
                }
                if p.via_group == Some(self.topo.nodes[sw].group) && self.topo.is_dragonfly() {
                    p.via_group = None;
                }
                let charge = Some(Charge { link, vc: wf.vc, bytes: wf.charged });
                let mut qp = QueuedPacket { packet: p, charge };
                if self.p.policy == Policy::Flowcut {
                    if self.topo.is_host_port(sw, in_port) {
                        self.ingress_data(sw, in_port, qp)
                    } else {
                        self.transit_data(sw, in_port, qp)
                    }
                } else {
                    let out = self.route(sw, in_port, &mut qp.packet);
                    self.enqueue_data(sw, in_port, out, qp)
                }
            }
            Frame::Ack(a) => self.switch_ack(sw, in_port, a),
            Frame::NicAck(mut a) => {
                a.hop_count += 1;
                if a.hop_count > MAX_HOP_COUNT {
                    return Err(SimError::HopCountOverflow(a.hop_count as u32));
                }
                let cands = self.topo.candidates(sw, a.to_host, None);
                let out = pick_ecmp(cands, &a.key, sw);
                self.enqueue_ctrl(sw, out, Frame::NicAck(a))
            }
            Frame::Signal(_) => unreachable!("pause signals are only sent to hosts"),
        }
    }

    /// Random intermediate group other than the source and destination
    /// groups, if one exists.
    fn random_via(&mut self, sw: NodeId, dst: HostId) -> Option<usize> {
        let gs = self.topo.nodes[sw].group;
        let gd = self.topo.nodes[self.topo.host_attach[dst].0].group;
        let g = self.topo.n_groups();
        if gs == gd || g <= 2 {
            return None;
        }
        let mut v = self.rng.gen_range(0..g - 2);
        for skip in [gs.min(gd), gs.max(gd)] {
            if v >= skip {
                v += 1;
            }
        }
        Some(v)
    }

    /// UGAL at the source switch: returns the intermediate group if the
    /// non-minimal route looks better.
    fn ugal_via(&mut self, sw: NodeId, p: &Packet) -> Option<usize> {
        let via = self.random_via(sw, p.dst)?;
        let probe = p.wire_size() as u64;
        let dst_sw = self.topo.host_attach[p.dst].0;
        let q_min = least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, self.topo.candidates(sw, p.dst, None), probe).drain_time();
        let q_nm = least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, self.topo.candidates(sw, p.dst, Some(via)), probe).drain_time();
        let h_min = self.topo.switch_distance(sw, dst_sw) as u128;
        let h_nm = self.topo.distance_via_group(sw, via, dst_sw) as u128;
        if ugal_prefers_minimal(q_min, h_min, q_nm, h_nm) {
            None
        } else {
            Some(via)
        }
    }

    /// Output port under a non-flowcut policy.
    fn route(&mut self, sw: NodeId, in_port: PortId, p: &mut Packet) -> PortId {
        if self.topo.is_dragonfly() && self.topo.is_host_port(sw, in_port) {
            p.via_group = match self.p.policy {
                Policy::Ugal => self.ugal_via(sw, p),
                Policy::Valiant => self.random_via(sw, p.dst),
                _ => None,
            };
        }
        let cands = self.topo.candidates(sw, p.dst, p.via_group);
        if cands.len() == 1 {
            return cands[0];
        }
        let probe = p.wire_size() as u64;
        let si = self.topo.switch_index(sw);
        match self.p.policy {
            Policy::Ecmp | Policy::NicFlowcut | Policy::Valiant => pick_ecmp(cands, &p.key, sw),
            Policy::Spray => cands[self.rng.gen_range(0..cands.len())],
            Policy::Ugal => least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, cands, probe).port,
            Policy::Flowlet => {
                let ll = least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, cands, probe).port;
                let now = self.q.now();
                self.switches[si].flowlet.route(&p.key, now, || ll)
            }
            Policy::Flowcell => {
                let ll = least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, cands, probe).port;
                self.switches[si].flowcell.route(&p.key, p.size as u64, || ll)
            }
            Policy::Flowcut => unreachable!("flowcut packets are routed by the flowcut table"),
        }
    }

    fn enqueue_data(&mut self, sw: NodeId, in_port: PortId, out: PortId, mut qp: QueuedPacket) -> Result<(), SimError> {
        let link = self.topo.nodes[sw].ports[out];
        let to_host = self.topo.is_host(self.topo.links[link].to);
        let p = &mut qp.packet;
        let cut = match self.p.policy {
            Policy::Flowcut if p.tracked => p.flowcut_seq,
            Policy::NicFlowcut => p.flowcut_seq,
            _ => u32::MAX,
        };
        let (flow, psn) = (p.flow, p.psn);
        let vc = if to_host {
            // Egress: strip the flowcut header and acknowledge.
            if self.p.policy == Policy::Flowcut {
                p.header_bytes = 0;
            }
            0
        } else {
            p.hop_count as usize
        };
        let ack = (to_host && self.p.policy == Policy::Flowcut && p.tracked).then(|| Ack::for_packet(p));
        let w = p.wire_size() as u64;
        self.record(flow, psn, sw, out, TraceKind::Data, cut);
        let port = &mut self.ports[link];
        port.data[vc].push_back(qp);
        port.nonempty |= 1 << vc;
        port.queued_bytes += w;
        if let Some(ack) = ack {
            self.send_ack(sw, in_port, ack)?;
        }
        self.try_send(link)
    }

    fn send_ack(&mut self, sw: NodeId, port: PortId, ack: Ack) -> Result<(), SimError> {
        self.record(ack.flow, ack.psn, sw, port, TraceKind::Ack, u32::MAX);
        self.enqueue_ctrl(sw, port, Frame::Ack(ack))
    }

    fn send_signal(&mut self, sw: NodeId, flow: FlowId, kind: SignalKind) -> Result<(), SimError> {
        let src = self.flows[flow].spec.src;
        let port = self.topo.host_attach[src].1;
        let key = self.flows[flow].key;
        let tk = if kind == SignalKind::Xoff { TraceKind::Xoff } else { TraceKind::Xon };
        self.record(flow, u32::MAX, sw, port, tk, u32::MAX);
        self.enqueue_ctrl(sw, port, Frame::Signal(Signal { kind, key, flow }))
    }

    fn ingress_data(&mut self, sw: NodeId, in_port: PortId, mut qp: QueuedPacket) -> Result<(), SimError> {
        let p = &mut qp.packet;
        let cands = self.topo.candidates(sw, p.dst, None);
        if self.topo.is_host_port(sw, cands[0]) {
            // Source and destination share a switch: a single path.
            p.tracked = false;
            let out = cands[0];
            return self.enqueue_data(sw, in_port, out, qp);
        }
        p.ingress_timestamp = self.q.now();
        p.header_bytes = FLOWCUT_HEADER_BYTES;
        let key = p.key;
        let si = self.topo.switch_index(sw);
        let table = &mut self.switches[si].table;
        if let Some(e) = table.ingress.get_mut(&key) {
            if !e.held.is_empty()
                || e.drain_state == DrainState::Draining
                || (e.predecessor.is_some() && e.budget == 0)
            {
                e.held.push_back(qp);
                return Ok(());
            }
            if e.predecessor.is_some() {
                e.budget -= 1;
            }
        } else if table.is_full() {
            table.fallbacks += 1;
            self.counters.table_fallbacks += 1;
            p.tracked = false;
            let out = pick_ecmp(cands, &key, sw);
            return self.enqueue_data(sw, in_port, out, qp);
        } else {
            let seq = next_cut(&mut self.flows[p.flow]);
            table.ingress.insert(key, FlowcutEntry::new(p.flow, p.src, in_port, seq));
            table.note_occupancy();
        }
        self.ingress_send(sw, qp)
    }

    /// Forward a packet admitted to its flowcut at the ingress switch.
    fn ingress_send(&mut self, sw: NodeId, mut qp: QueuedPacket) -> Result<(), SimError> {
        let si = self.topo.switch_index(sw);
        let key = qp.packet.key;
        let e = &self.switches[si].table.ingress[&key];
        let (out, via) = match e.out_port {
            Some(o) => (o, e.via_group),
            None => {
                let via = if self.topo.is_dragonfly() { self.ugal_via(sw, &qp.packet) } else { None };
                let cands = self.topo.candidates(sw, qp.packet.dst, via);
                (least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, cands, qp.packet.wire_size() as u64).port, via)
            }
        };
        let e = self.switches[si].table.ingress.get_mut(&key).expect("entry");
        e.out_port = Some(out);
        e.via_group = via;
        e.inflight_bytes += qp.packet.size as u64;
        e.inflight_packets += 1;
        let p = &mut qp.packet;
        p.epoch = e.epoch;
        p.via_group = via;
        p.tracked = true;
        p.flowcut_seq = e.flowcut_seq;
        let in_port = e.in_port;
        self.enqueue_data(sw, in_port, out, qp)
    }

    fn transit_data(&mut self, sw: NodeId, in_port: PortId, mut qp: QueuedPacket) -> Result<(), SimError> {
        let p = &mut qp.packet;
        let cands = self.topo.candidates(sw, p.dst, p.via_group);
        if self.topo.is_host_port(sw, cands[0]) {
            let out = cands[0];
            return self.enqueue_data(sw, in_port, out, qp);
        }
        if !p.tracked {
            let out = pick_ecmp(cands, &p.key, sw);
            return self.enqueue_data(sw, in_port, out, qp);
        }
        let k = (p.key, p.epoch);
        let si = self.topo.switch_index(sw);
        let out = if let Some(t) = self.switches[si].table.transit.get_mut(&k) {
            t.inflight_bytes += p.size as u64;
            t.out_port
        } else if self.switches[si].table.is_full() {
            // The ACK cannot be routed back; the ingress entry keeps these
            // bytes in flight for good.
            self.switches[si].table.fallbacks += 1;
            self.counters.table_fallbacks += 1;
            p.tracked = false;
            pick_ecmp(cands, &p.key, sw)
        } else {
            let o = if cands.len() == 1 { cands[0] } else { least_loaded_port(&self.topo, &self.ports, &mut self.rng, sw, cands, p.wire_size() as u64).port };
            let table = &mut self.switches[si].table;
            table.transit.insert(k, TransitEntry { in_port, out_port: o, inflight_bytes: p.size as u64 });
            table.note_occupancy();
            o
        };
        self.enqueue_data(sw, in_port, out, qp)
    }

    fn switch_ack(&mut self, sw: NodeId, in_port: PortId, a: Ack) -> Result<(), SimError> {
        let si = self.topo.switch_index(sw);
        let src = host_of_addr(a.key.src_addr);
        if self.topo.host_attach[src].0 != sw {
            let k = (a.key, a.epoch);
            let table = &mut self.switches[si].table;
            let Some(t) = table.transit.get_mut(&k) else {
                table.stale_acks += 1;
                self.counters.stale_acks += 1;
                return Ok(());
            };
            t.inflight_bytes = t.inflight_bytes.checked_sub(a.acked_bytes as u64).ok_or_else(|| SimError::Invariant {
                time: self.q.now(),
                what: format!("transit in-flight underflow for flow {}", a.flow),
            })?;
            let out = t.in_port;
            if t.inflight_bytes == 0 {
                table.transit.remove(&k);
            }
            return self.send_ack(sw, out, a);
        }

        if self.p.ack_loss > 0.0 && self.fault_rng.gen::<f64>() < self.p.ack_loss {
            self.counters.lost_acks += 1;
            return Ok(());
        }
        self.record(a.flow, a.psn, sw, in_port, TraceKind::AckConsumed, u32::MAX);
        let measured = self.q.now() - a.echoed_timestamp;
        let measured_ns = measured.as_nanos_f64();
        self.counters.max_ingress_rtt_ns = self.counters.max_ingress_rtt_ns.max(measured_ns);
        let now = self.q.now();
        let params = self.p.congestion;
        let FlowcutTable { ingress, rtt_floor, stale_acks, .. } = &mut self.switches[si].table;
        let Some(e) = ingress.get_mut(&a.key) else {
            *stale_acks += 1;
            self.counters.stale_acks += 1;
            return Ok(());
        };
        let underflow = || SimError::Invariant { time: now, what: format!("ingress in-flight underflow for flow {}", a.flow) };

        if a.epoch != e.epoch {
            let Some(pr) = e.predecessor.as_mut().filter(|pr| pr.epoch == a.epoch) else {
                *stale_acks += 1;
                self.counters.stale_acks += 1;
                return Ok(());
            };
            pr.inflight_bytes = pr.inflight_bytes.checked_sub(a.acked_bytes as u64).ok_or_else(underflow)?;
            pr.inflight_packets -= 1;
            if pr.inflight_bytes > 0 {
                return Ok(());
            }
            e.predecessor = None;
            e.drain_state = DrainState::Active;
            if e.is_idle() {
                ingress.remove(&a.key);
                return Ok(());
            }
            let held = std::mem::take(&mut e.held);
            for qp in held {
                self.ingress_send(sw, qp)?;
            }
            return Ok(());
        }

        e.inflight_bytes = e.inflight_bytes.checked_sub(a.acked_bytes as u64).ok_or_else(underflow)?;
        e.inflight_packets -= 1;
        let n = normalized_rtt(measured_ns, a.acked_bytes, a.echoed_hop_count, &params, rtt_floor)?;
        e.rtt.update(n, params.alpha);
        let flow = e.flow;

        if e.inflight_bytes == 0 && e.predecessor.is_none() {
            let draining = e.drain_state == DrainState::Draining;
            if e.held.is_empty() {
                ingress.remove(&a.key);
            } else {
                // The source resumed on its own before the drain finished;
                // what it sent meanwhile starts the next flowcut.
                e.restart();
                e.flowcut_seq = next_cut(&mut self.flows[flow]);
                let held = std::mem::take(&mut e.held);
                for qp in held {
                    self.ingress_send(sw, qp)?;
                }
            }
            if draining {
                self.send_signal(sw, flow, SignalKind::Xon)?;
            }
            return Ok(());
        }
        if e.predecessor.is_some() {
            return Ok(());
        }
        let partial = self.p.ood_bound.filter(|&k| e.inflight_packets <= k);
        match e.drain_state {
            DrainState::Active => {
                if evaluate_drain(&e.rtt, &params) == DrainDecision::Drain {
                    self.flows[flow].drains += 1;
                    if let Some(k) = partial {
                        e.split(k);
                        e.flowcut_seq = next_cut(&mut self.flows[flow]);
                    } else {
                        e.drain_state = DrainState::Draining;
                        self.send_signal(sw, flow, SignalKind::Xoff)?;
                    }
                }
            }
            DrainState::Draining => {
                if let Some(k) = partial {
                    e.split(k);
                    e.flowcut_seq = next_cut(&mut self.flows[flow]);
                    let mut release = Vec::new();
                    while e.budget > 0 && !e.held.is_empty() {
                        e.budget -= 1;
                        release.extend(e.held.pop_front());
                    }
                    self.send_signal(sw, flow, SignalKind::Xon)?;
                    for qp in release {
                        self.ingress_send(sw, qp)?;
                    }
                }
            }
            DrainState::DrainedAwaitingResume => {}
        }
        Ok(())
    }

    // ----- hosts -------------------------------------------------------

    fn start_flow(&mut self, f: FlowId) -> Result<(), SimError> {
        let now = self.now();
        let fs = &mut self.flows[f];
        fs.start = Some(now);
        let src = fs.spec.src;
        let h = &mut self.hosts[src];
        h.active_flows += 1;
        self.counters.max_concurrent_flows_per_host = self.counters.max_concurrent_flows_per_host.max(h.active_flows);
        if fs.spec.size == 0 {
            return self.complete(f);
        }
        fs.in_ready = true;
        h.ready.push_back(f);
        self.try_send(self.topo.host_uplink(src))
    }

    fn complete(&mut self, f: FlowId) -> Result<(), SimError> {
        let now = self.now();
        let fs = &mut self.flows[f];
        fs.end = Some(now);
        self.completed += 1;
        self.hosts[fs.spec.src].active_flows -= 1;
        for d in std::mem::take(&mut fs.dependents) {
            self.q.schedule(now, Ev::Start(d))?;
        }
        Ok(())
    }

    /// Next packet for the host's uplink, round-robin over unpaused flows,
    /// or `None` if nothing can be sent now.
    fn host_next_packet(&mut self, h: HostId) -> Option<Packet> {
        let uplink = self.topo.host_uplink(h);
        let header = if self.p.policy == Policy::NicFlowcut { FLOWCUT_HEADER_BYTES } else { 0 };
        let now = self.q.now();
        loop {
            let &f = self.hosts[h].ready.front()?;
            let fs = &mut self.flows[f];
            if fs.pause.paused || fs.remaining() == 0 {
                self.hosts[h].ready.pop_front();
                fs.in_ready = false;
                continue;
            }
            let size = fs.remaining().min(self.p.mtu as u64) as u32;
            if self.ports[uplink].credits[0] < size + header {
                return None;
            }
            self.hosts[h].ready.pop_front();
            let psn = fs.next_psn;
            fs.next_psn += 1;
            fs.sent += size as u64;
            let last = fs.remaining() == 0;
            if last {
                fs.in_ready = false;
            } else {
                self.hosts[h].ready.push_back(f);
            }
            let nic = self.p.policy == Policy::NicFlowcut;
            if nic {
                fs.nic.inflight_bytes += size as u64;
            }
            return Some(Packet {
                flow: f,
                key: fs.key,
                src: h,
                dst: fs.spec.dst,
                psn,
                size,
                header_bytes: header,
                ingress_timestamp: if nic { now } else { SimTime::ZERO },
                hop_count: 0,
                is_last_of_flow: last,
                epoch: 0,
                via_group: None,
                tracked: nic,
                flowcut_seq: if nic { fs.reroutes } else { 0 },
            });
        }
    }

    fn resume_flow(&mut self, f: FlowId) -> Result<bool, SimError> {
        let now = self.now();
        let fs = &mut self.flows[f];
        if !fs.pause.resume(now) {
            return Ok(false);
        }
        if fs.remaining() > 0 && !fs.in_ready {
            fs.in_ready = true;
            let src = fs.spec.src;
            self.hosts[src].ready.push_back(f);
            self.try_send(self.topo.host_uplink(src))?;
        }
        Ok(true)
    }

    fn host_receive(&mut self, h: HostId, link: LinkId, wf: WireFrame) -> Result<(), SimError> {
        match wf.frame {
            Frame::Data(p) => {
                let now = self.now();
                self.record(p.flow, p.psn, h, 0, TraceKind::Deliver, u32::MAX);
                let f = p.flow;
                let fs = &mut self.flows[f];
                fs.rx.on_packet(p.psn, p.size as u64);
                self.timeline.record(now, p.size as u64);
                let done = fs.rx.bytes == fs.spec.size;
                if self.p.policy == Policy::NicFlowcut {
                    let ack = NicAck {
                        key: p.key.reversed(),
                        to_host: p.src,
                        flow: f,
                        psn: p.psn,
                        acked_bytes: p.size,
                        echoed_timestamp: p.ingress_timestamp,
                        echoed_hop_count: p.hop_count,
                        hop_count: 0,
                    };
                    let up = self.topo.host_uplink(h);
                    self.ports[up].ctrl.push_back(Frame::NicAck(ack));
                    self.try_send(up)?;
                }
                if done {
                    self.complete(f)?;
                }
                self.ports[link].credits[wf.vc as usize] += wf.charged;
                self.try_send(link)
            }
            Frame::Signal(s) => self.host_signal(s),
            Frame::NicAck(a) => self.nic_ack(h, a),
            Frame::Ack(_) => unreachable!("switch ACKs never reach hosts"),
        }
    }

    fn host_signal(&mut self, s: Signal) -> Result<(), SimError> {
        let now = self.now();
        let f = s.flow;
        match s.kind {
            SignalKind::Xoff => {
                let fs = &mut self.flows[f];
                if fs.remaining() == 0 {
                    self.counters.stale_control += 1;
                } else if fs.pause.pause(now) {
                    if let Some(t) = self.resume_after {
                        let g = fs.pause.generation;
                        self.q.schedule(now + t, Ev::ResumeTimeout(f, g))?;
                    }
                }
                Ok(())
            }
            SignalKind::Xon => {
                if self.p.xon_loss > 0.0 && self.fault_rng.gen::<f64>() < self.p.xon_loss {
                    self.counters.lost_xons += 1;
                    return Ok(());
                }
                if !self.resume_flow(f)? {
                    self.counters.stale_control += 1;
                }
                Ok(())
            }
        }
    }

    fn nic_ack(&mut self, h: HostId, a: NicAck) -> Result<(), SimError> {
        if self.p.ack_loss > 0.0 && self.fault_rng.gen::<f64>() < self.p.ack_loss {
            self.counters.lost_acks += 1;
            return Ok(());
        }
        let now = self.now();
        let measured_ns = (now - a.echoed_timestamp).as_nanos_f64();
        self.counters.max_ingress_rtt_ns = self.counters.max_ingress_rtt_ns.max(measured_ns);
        let params = self.p.congestion;
        let fs = &mut self.flows[a.flow];
        fs.nic.inflight_bytes -= a.acked_bytes as u64;
        let n = normalized_rtt(measured_ns, a.acked_bytes, a.echoed_hop_count, &params, &mut self.hosts[h].nic_floor)?;
        fs.nic.rtt.update(n, params.alpha);
        if !fs.nic.draining && fs.remaining() > 0 && evaluate_drain(&fs.nic.rtt, &params) == DrainDecision::Drain {
            fs.nic.draining = true;
            fs.drains += 1;
            fs.pause.pause(now);
        }
        if fs.nic.inflight_bytes == 0 {
            fs.nic.rtt = Default::default();
            if fs.nic.draining {
                fs.nic.draining = false;
                let old = fs.key.src_port;
                while fs.key.src_port == old {
                    fs.key.src_port = self.rng.gen_range(FIRST_SRC_PORT..=u16::MAX);
                }
                fs.reroutes += 1;
                self.resume_flow(a.flow)?;
            }
        }
        Ok(())
    }

    // ----- checks and results ------------------------------------------

    fn check_invariants(&self) -> Result<(), SimError> {
        let time = self.now();
        let fail = |what: String| Err(SimError::Invariant { time, what });
        let mut charged: FxHashMap<(LinkId, u8), u64> = FxHashMap::default();
        let mut in_net = vec![0u64; self.flows.len()];
        let mut cut_inflight: FxHashMap<(FlowId, u8), u64> = FxHashMap::default();
        let mut nic_inflight = vec![0u64; self.flows.len()];

        let data = |p: &Packet, past_egress: bool, in_net: &mut Vec<u64>, cut: &mut FxHashMap<(FlowId, u8), u64>, nic: &mut Vec<u64>| {
            in_net[p.flow] += p.size as u64;
            nic[p.flow] += p.size as u64;
            if p.tracked && !past_egress {
                *cut.entry((p.flow, p.epoch)).or_default() += p.size as u64;
            }
        };
        for (l, port) in self.ports.iter().enumerate() {
            let to_host = self.topo.is_host(self.topo.links[l].to);
            for wf in &port.wire {
                if wf.charged > 0 {
                    *charged.entry((l, wf.vc)).or_default() += wf.charged as u64;
                }
                match &wf.frame {
                    Frame::Data(p) => data(p, to_host, &mut in_net, &mut cut_inflight, &mut nic_inflight),
                    Frame::Ack(a) => *cut_inflight.entry((a.flow, a.epoch)).or_default() += a.acked_bytes as u64,
                    Frame::NicAck(a) => nic_inflight[a.flow] += a.acked_bytes as u64,
                    Frame::Signal(_) => {}
                }
            }
            for qp in port.data.iter().flatten() {
                if let Some(c) = qp.charge {
                    *charged.entry((c.link, c.vc)).or_default() += c.bytes as u64;
                }
                data(&qp.packet, to_host, &mut in_net, &mut cut_inflight, &mut nic_inflight);
            }
            for f in &port.ctrl {
                match f {
                    Frame::Ack(a) => *cut_inflight.entry((a.flow, a.epoch)).or_default() += a.acked_bytes as u64,
                    Frame::NicAck(a) => nic_inflight[a.flow] += a.acked_bytes as u64,
                    _ => {}
                }
            }
        }
        let mut expected_cut: FxHashMap<(FlowId, u8), u64> = FxHashMap::default();
        for s in &self.switches {
            for e in s.table.ingress.values() {
                for qp in &e.held {
                    if let Some(c) = qp.charge {
                        *charged.entry((c.link, c.vc)).or_default() += c.bytes as u64;
                    }
                    in_net[qp.packet.flow] += qp.packet.size as u64;
                }
                if e.inflight_bytes > 0 {
                    expected_cut.insert((e.flow, e.epoch), e.inflight_bytes);
                }
                if let Some(pr) = e.predecessor {
                    if pr.inflight_bytes > 0 {
                        expected_cut.insert((e.flow, pr.epoch), pr.inflight_bytes);
                    }
                }
            }
        }

        let buf = self.p.buffer_bytes as u64;
        for (l, port) in self.ports.iter().enumerate() {
            for vc in 0..NUM_VCS {
                let held = charged.get(&(l, vc as u8)).copied().unwrap_or(0);
                if port.credits[vc] as u64 + held != buf {
                    return fail(format!(
                        "credit conservation on link {l} vc {vc}: {} available + {held} outstanding != {buf}",
                        port.credits[vc]
                    ));
                }
            }
        }
        for (f, fs) in self.flows.iter().enumerate() {
            if fs.sent != fs.rx.bytes + in_net[f] {
                return fail(format!(
                    "byte conservation for flow {f}: sent {} != delivered {} + in network {}",
                    fs.sent, fs.rx.bytes, in_net[f]
                ));
            }
        }
        if self.p.ack_loss > 0.0 {
            return Ok(());
        }
        match self.p.policy {
            Policy::Flowcut => {
                cut_inflight.retain(|_, v| *v > 0);
                if cut_inflight != expected_cut {
                    let mut diff: Vec<_> = expected_cut
                        .iter()
                        .filter(|(k, v)| cut_inflight.get(k) != Some(v))
                        .map(|(k, v)| (*k, *v, cut_inflight.get(k).copied()))
                        .collect();
                    diff.extend(cut_inflight.iter().filter(|(k, _)| !expected_cut.contains_key(k)).map(|(k, v)| (*k, 0, Some(*v))));
                    diff.sort();
                    return fail(format!("ingress in-flight mismatch (flow, epoch), counter, in network: {:?}", &diff[..diff.len().min(4)]));
                }
            }
            Policy::NicFlowcut => {
                for (f, fs) in self.flows.iter().enumerate() {
                    if fs.nic.inflight_bytes != nic_inflight[f] {
                        return fail(format!(
                            "NIC in-flight mismatch for flow {f}: counter {} vs {} in network",
                            fs.nic.inflight_bytes, nic_inflight[f]
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn check_trace(&self) -> Result<(), SimError> {
        let Some(events) = &self.trace else { return Ok(()) };
        let time = self.now();
        let wrap = |r: Result<(), String>| r.map_err(|what| SimError::Invariant { time, what });
        if matches!(self.p.policy, Policy::Flowcut | Policy::NicFlowcut) && self.p.ack_loss == 0.0 && self.p.ood_bound.is_none() {
            wrap(check_single_path(events))?;
        }
        if self.p.policy == Policy::Flowcut {
            wrap(check_ack_reverse_path(events))?;
        }
        if self.topo.is_fat_tree() {
            wrap(check_up_down(&self.topo, events))?;
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        let flows: Vec<FlowRecord> = self
            .flows
            .iter()
            .map(|fs| FlowRecord {
                key_hash: fs.key_hash,
                src: fs.spec.src,
                dst: fs.spec.dst,
                size: fs.spec.size,
                start: fs.start.expect("finished flow started"),
                end: fs.end.expect("finished flow ended"),
                packets: fs.rx.packets,
                ooo: fs.rx.ooo,
                ood: fs.rx.max_ood,
                paused: fs.pause.total,
                paused_intervals: fs.pause.intervals.clone(),
                drains: fs.drains,
                reroutes: fs.reroutes,
            })
            .collect();
        let switches: Vec<SwitchStats> = self
            .switches
            .iter()
            .enumerate()
            .map(|(i, s)| SwitchStats {
                switch: self.topo.label(self.topo.n_hosts + i),
                max_table_occupancy: s.table.max_occupancy,
                table_fallbacks: s.table.fallbacks,
                stale_acks: s.table.stale_acks,
            })
            .collect();
        self.counters.events = self.q.dispatched();
        self.counters.max_table_occupancy = switches.iter().map(|s| s.max_table_occupancy).max().unwrap_or(0);
        let report = RunReport {
            config_digest: String::new(),
            seed: self.p.seed,
            policy: self.p.policy.name().to_string(),
            final_time_ns: self.q.now().as_nanos_f64(),
            aggregates: aggregate(&flows),
            counters: self.counters,
            fabric: self.fabric,
            switches,
            timeline: self.timeline,
            flows,
        };
        RunOutput { report, trace: self.trace, topology: self.topo }
    }
}

fn least_loaded_port(
    topo: &Topology,
    ports: &[Port],
    rng: &mut ChaCha8Rng,
    sw: NodeId,
    cands: &[PortId],
    probe: u64,
) -> PortLoad {
    let loads = cands.iter().map(|&port| {
        let l = topo.nodes[sw].ports[port];
        let st = &ports[l];
        PortLoad { port, bytes: st.queued_bytes + st.in_service as u64 + probe, bandwidth_bps: topo.links[l].bandwidth_bps }
    });
    least_loaded_random(loads, rng)
}

fn pick_ecmp(cands: &[PortId], key: &FlowKey, sw: NodeId) -> PortId {
    if cands.len() == 1 {
        cands[0]
    } else {
        cands[ecmp_index(key, sw as u64, cands.len())]
    }
}
