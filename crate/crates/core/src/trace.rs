//! Per-hop event trace and the path checks run over it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::packet::FlowId;
use crate::time::SimTime;
use crate::topology::{NodeId, PortId, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TraceKind {
    /// A switch queued a data packet on an output port.
    Data,
    /// A switch generated or forwarded an ACK out of a port.
    Ack,
    /// The ingress switch consumed an ACK.
    AckConsumed,
    /// A host received a data packet.
    Deliver,
    Xoff,
    Xon,
}

impl TraceKind {
    fn name(self) -> &'static str {
        match self {
            TraceKind::Data => "data",
            TraceKind::Ack => "ack",
            TraceKind::AckConsumed => "ack-consumed",
            TraceKind::Deliver => "deliver",
            TraceKind::Xoff => "xoff",
            TraceKind::Xon => "xon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub flow: FlowId,
    pub key_hash: u64,
    pub psn: u32,
    pub node: NodeId,
    pub port: PortId,
    pub kind: TraceKind,
    /// Flowcut sequence number of data packets (`u32::MAX` if untracked).
    pub flowcut: u32,
}

/// One line per event: `time_ns key_hash psn node port kind`.
pub fn format_trace(t: &Topology, events: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 48);
    for e in events {
        let _ = writeln!(
            out,
            "{} {:016x} {} {} {} {}",
            e.time.fmt_nanos(),
            e.key_hash,
            e.psn,
            t.label(e.node),
            e.port,
            e.kind.name()
        );
    }
    out
}

type PacketPaths = BTreeMap<(FlowId, u32), (u32, Vec<NodeId>)>;

fn data_paths(events: &[TraceEvent]) -> PacketPaths {
    let mut paths: PacketPaths = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == TraceKind::Data) {
        let entry = paths.entry((e.flow, e.psn)).or_insert((e.flowcut, Vec::new()));
        entry.1.push(e.node);
    }
    paths
}

/// A flow only changes path where nothing it sent earlier is still in
/// flight: when two consecutive packets part ways at some switch, every
/// earlier packet had already been queued towards the destination host
/// (the last hop is one FIFO) before the later one left that switch.
/// Untracked (table fallback) packets are skipped.
pub fn check_single_path(events: &[TraceEvent]) -> Result<(), String> {
    type Hops = Vec<(NodeId, SimTime)>;
    let mut hops: BTreeMap<(FlowId, u32), Hops> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == TraceKind::Data && e.flowcut != u32::MAX) {
        hops.entry((e.flow, e.psn)).or_default().push((e.node, e.time));
    }
    let mut prev: Option<(FlowId, u32, &Hops)> = None;
    let mut last_arrival = SimTime::ZERO;
    for (&(flow, psn), path) in &hops {
        match prev.filter(|p| p.0 == flow) {
            Some((_, pp, ppath)) => {
                // Index of the first differing hop; 0 means the source
                // itself moved the flow.
                if let Some(i) = path.iter().zip(ppath.iter()).position(|(a, b)| a.0 != b.0) {
                    let (node, t) = path[i.saturating_sub(1)];
                    if last_arrival > t {
                        return Err(format!(
                            "flow {flow}: psn {psn} left switch {node} at {} on a new path, but psn <= {pp} reached its last switch only at {} ({ppath:?} vs {path:?})",
                            t.fmt_nanos(),
                            last_arrival.fmt_nanos()
                        ));
                    }
                }
            }
            None => last_arrival = SimTime::ZERO,
        }
        last_arrival = last_arrival.max(path.last().expect("non-empty path").1);
        prev = Some((flow, psn, path));
    }
    Ok(())
}

/// Each ACK visits the switches of its data packet in reverse order.
pub fn check_ack_reverse_path(events: &[TraceEvent]) -> Result<(), String> {
    let data = data_paths(events);
    let mut acks: BTreeMap<(FlowId, u32), Vec<NodeId>> = BTreeMap::new();
    for e in events.iter().filter(|e| matches!(e.kind, TraceKind::Ack | TraceKind::AckConsumed)) {
        acks.entry((e.flow, e.psn)).or_default().push(e.node);
    }
    for (k, ack_path) in acks {
        let Some((_, fwd)) = data.get(&k) else {
            return Err(format!("ACK for flow {} psn {} without data trace", k.0, k.1));
        };
        let mut rev = fwd.clone();
        rev.reverse();
        // A lost ACK stops early; what was traced must still be a prefix.
        if ack_path.len() > rev.len() || rev[..ack_path.len()] != ack_path[..] {
            return Err(format!("flow {} psn {}: data {fwd:?}, ack {ack_path:?}", k.0, k.1));
        }
    }
    Ok(())
}

/// Fat-tree paths climb, then descend, never climbing again.
pub fn check_up_down(t: &Topology, events: &[TraceEvent]) -> Result<(), String> {
    for ((flow, psn), (_, path)) in data_paths(events) {
        let levels: Vec<u8> = path.iter().map(|&n| t.nodes[n].role.level()).collect();
        let mut descending = false;
        for w in levels.windows(2) {
            if w[1] < w[0] {
                descending = true;
            } else if descending || w[1] == w[0] {
                return Err(format!("flow {flow} psn {psn}: levels {levels:?} are not up/down"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(flow: FlowId, psn: u32, node: NodeId, kind: TraceKind, flowcut: u32) -> TraceEvent {
        TraceEvent { time: SimTime::ZERO, flow, key_hash: 0, psn, node, port: 0, kind, flowcut }
    }

    fn at(mut e: TraceEvent, ns: u64) -> TraceEvent {
        e.time = SimTime::from_nanos(ns);
        e
    }

    #[test]
    fn path_change_needs_empty_pipe() {
        // psn 1 leaves switch 5 towards 7 at t=10; psn 0 reached 6 at t=4.
        let ok = vec![
            at(ev(0, 0, 5, TraceKind::Data, 0), 0),
            at(ev(0, 0, 6, TraceKind::Data, 0), 4),
            at(ev(0, 1, 5, TraceKind::Data, 0), 10),
            at(ev(0, 1, 7, TraceKind::Data, 0), 14),
        ];
        assert!(check_single_path(&ok).is_ok());
        let mut bad = ok.clone();
        bad[1].time = SimTime::from_nanos(12);
        assert!(check_single_path(&bad).is_err());
        // Same path: overlap is fine.
        bad[3].node = 6;
        assert!(check_single_path(&bad).is_ok());
    }

    #[test]
    fn detects_wrong_ack_path() {
        let mut e = vec![
            ev(0, 0, 5, TraceKind::Data, 0),
            ev(0, 0, 6, TraceKind::Data, 0),
            ev(0, 0, 6, TraceKind::Ack, 0),
            ev(0, 0, 5, TraceKind::AckConsumed, 0),
        ];
        assert!(check_ack_reverse_path(&e).is_ok());
        e[3].node = 9;
        assert!(check_ack_reverse_path(&e).is_err());
    }
}
