//! Wire-level units: flow keys, data packets, switch ACKs and pause signals.

use std::fmt;
use std::net::Ipv4Addr;

use crate::time::SimTime;

/// Bytes in a switch-generated ACK: 13-byte flow key, acked size, timestamp
/// and hop count, plus the preamble marker byte.
pub const ACK_WIRE_BYTES: u32 = 20;
/// XOFF/XON control frames use the same compact format as ACKs.
pub const SIGNAL_WIRE_BYTES: u32 = 20;
/// Extra header between Ethernet and IP on fabric hops: 2-byte timestamp and
/// one byte holding the 4-bit hop counter and 4 reserved bits.
pub const FLOWCUT_HEADER_BYTES: u32 = 3;
/// NIC-to-NIC ACKs need Ethernet and IPv4 headers since no switch state
/// routes them.
pub const NIC_ACK_WIRE_BYTES: u32 = ACK_WIRE_BYTES + 14 + 20;
/// Largest hop count representable in the 4-bit field.
pub const MAX_HOP_COUNT: u8 = 15;
/// RoCEv2 destination UDP port.
pub const ROCE_UDP_PORT: u16 = 4791;
pub const PROTO_UDP: u8 = 17;

pub type FlowId = usize;
pub type HostId = usize;

/// IP 5-tuple identifying a flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FlowKey {
    pub const ENCODED_LEN: usize = 13;

    pub fn new(src_addr: Ipv4Addr, dst_addr: Ipv4Addr, src_port: u16, dst_port: u16, protocol: u8) -> Self {
        FlowKey { src_addr, dst_addr, src_port, dst_port, protocol }
    }

    /// Canonical 13-byte big-endian encoding as carried in ACKs.
    pub fn encode(&self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0..4].copy_from_slice(&self.src_addr.octets());
        out[4..8].copy_from_slice(&self.dst_addr.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.protocol;
        out
    }

    pub fn decode(bytes: &[u8; 13]) -> Self {
        FlowKey {
            src_addr: Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]),
            dst_addr: Ipv4Addr::new(bytes[4], bytes[5], bytes[6], bytes[7]),
            src_port: u16::from_be_bytes([bytes[8], bytes[9]]),
            dst_port: u16::from_be_bytes([bytes[10], bytes[11]]),
            protocol: bytes[12],
        }
    }

    /// Stable 64-bit FNV-1a hash of the canonical encoding.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.encode() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Key of the reverse direction, used to hash NIC-level ACKs.
    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.protocol
        )
    }
}

/// Address assigned to host `id` (10.0.0.0/8).
pub fn host_addr(id: HostId) -> Ipv4Addr {
    let id = id as u32;
    Ipv4Addr::new(10, (id >> 16) as u8, (id >> 8) as u8, id as u8)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Packet {
    pub flow: FlowId,
    pub key: FlowKey,
    pub src: HostId,
    pub dst: HostId,
    pub psn: u32,
    /// Payload bytes as sent by the host.
    pub size: u32,
    /// Flowcut header bytes currently attached (fabric hops only).
    pub header_bytes: u32,
    /// Stamped by the ingress switch (switch mode) or the source NIC.
    pub ingress_timestamp: SimTime,
    /// Switches traversed so far.
    pub hop_count: u8,
    pub is_last_of_flow: bool,
    /// Flowcut generation bit, carried in a reserved header bit and echoed in ACKs.
    pub epoch: u8,
    /// Dragonfly intermediate group still to be visited.
    pub via_group: Option<usize>,
    /// Whether switches account this packet in their flowcut tables.
    pub tracked: bool,
    /// Ingress flowcut sequence number (bookkeeping for traces).
    pub flowcut_seq: u32,
}

impl Packet {
    pub fn wire_size(&self) -> u32 {
        self.size + self.header_bytes
    }
}

/// Switch-level acknowledgment sent by the egress switch back along the
/// data packet's reverse path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ack {
    pub key: FlowKey,
    pub acked_bytes: u32,
    pub echoed_timestamp: SimTime,
    pub echoed_hop_count: u8,
    pub epoch: u8,
    // Bookkeeping, not on the wire.
    pub flow: FlowId,
    pub psn: u32,
}

impl Ack {
    pub const WIRE_SIZE: u32 = ACK_WIRE_BYTES;

    /// Build the ACK for a data packet reaching its egress switch.
    pub fn for_packet(p: &Packet) -> Ack {
        Ack {
            key: p.key,
            acked_bytes: p.size,
            echoed_timestamp: p.ingress_timestamp,
            echoed_hop_count: p.hop_count,
            epoch: p.epoch,
            flow: p.flow,
            psn: p.psn,
        }
    }

    pub fn wire_size(&self) -> u32 {
        Self::WIRE_SIZE
    }
}

/// End-to-end ACK used by the NIC-driven variant; routed like any packet.
#[derive(Clone, Copy, Debug)]
pub struct NicAck {
    pub key: FlowKey,
    pub to_host: HostId,
    pub flow: FlowId,
    pub psn: u32,
    pub acked_bytes: u32,
    pub echoed_timestamp: SimTime,
    pub echoed_hop_count: u8,
    pub hop_count: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Xoff,
    Xon,
}

/// Per-flow pause/resume frame from an ingress switch to a source host.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signal {
    pub kind: SignalKind,
    pub key: FlowKey,
    pub flow: FlowId,
}

/// Anything that occupies a link.
#[derive(Clone, Debug)]
pub enum Frame {
    Data(Packet),
    Ack(Ack),
    NicAck(NicAck),
    Signal(Signal),
}

impl Frame {
    pub fn wire_size(&self) -> u32 {
        match self {
            Frame::Data(p) => p.wire_size(),
            Frame::Ack(_) => ACK_WIRE_BYTES,
            Frame::NicAck(_) => NIC_ACK_WIRE_BYTES,
            Frame::Signal(_) => SIGNAL_WIRE_BYTES,
        }
    }

    pub fn is_data(&self) -> bool {
        matches!(self, Frame::Data(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(a: u32, b: u32, sp: u16, dp: u16, pr: u8) -> FlowKey {
        FlowKey::new(Ipv4Addr::from(a), Ipv4Addr::from(b), sp, dp, pr)
    }

    #[test]
    fn ack_echoes_data_packet() {
        let p = Packet {
            flow: 7,
            key: key(1, 2, 3, 4, 17),
            src: 0,
            dst: 1,
            psn: 9,
            size: 2048,
            header_bytes: FLOWCUT_HEADER_BYTES,
            ingress_timestamp: SimTime::from_nanos(1000),
            hop_count: 3,
            is_last_of_flow: false,
            epoch: 0,
            via_group: None,
            tracked: true,
            flowcut_seq: 0,
        };
        let ack = Ack::for_packet(&p);
        assert_eq!(ack.acked_bytes, 2048);
        assert_eq!(ack.echoed_timestamp, SimTime::from_nanos(1000));
        assert_eq!(ack.echoed_hop_count, 3);
        assert_eq!(ack.wire_size(), 20);

        let tiny = Packet { size: 1, ..p };
        assert_eq!(Ack::for_packet(&tiny).wire_size(), 20);
    }

    proptest! {
        #[test]
        fn encoding_is_injective(a: u32, b: u32, sp: u16, dp: u16, pr: u8,
                                 a2: u32, b2: u32, sp2: u16, dp2: u16, pr2: u8) {
            let k1 = key(a, b, sp, dp, pr);
            let k2 = key(a2, b2, sp2, dp2, pr2);
            prop_assert_eq!(FlowKey::decode(&k1.encode()), k1);
            prop_assert_eq!(k1 == k2, k1.encode() == k2.encode());
        }
    }
}
