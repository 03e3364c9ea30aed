use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use super::pcap::{
    RawPacket, LINKTYPE_ETHERNET, LINKTYPE_IPV4, LINKTYPE_IPV6, LINKTYPE_RAW, LINKTYPE_RAW_BSD,
};

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;

/// Chained IPv6 extension headers beyond this count are rejected.
pub const MAX_IPV6_EXTENSIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_addr: IpAddr,
    pub dst_addr: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FiveTuple {
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            src_port: self.dst_port,
            dst_port: self.src_port,
            proto: self.proto,
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.proto
        )
    }
}

/// TCP control bits in wire order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ECE: u8 = 0x40;
    pub const CWR: u8 = 0x80;

    pub fn empty() -> Self {
        TcpFlags(0)
    }

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }
    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }
    pub fn rst(self) -> bool {
        self.contains(Self::RST)
    }
    pub fn psh(self) -> bool {
        self.contains(Self::PSH)
    }
    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPacket {
    pub timestamp: f64,
    pub tuple: FiveTuple,
    pub ip_header_len: u16,
    pub transport_header_len: u16,
    /// Payload length implied by the IP length fields.
    pub payload_len: u32,
    pub tcp_flags: TcpFlags,
    /// Captured payload bytes; shorter than `payload_len` only for truncated frames.
    pub payload: Vec<u8>,
}

impl DecodedPacket {
    pub fn header_len(&self) -> u32 {
        self.ip_header_len as u32 + self.transport_header_len as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    UnsupportedLinkType,
    NonIp,
    UnsupportedTransport,
    Fragment,
    Malformed,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::UnsupportedLinkType => "unsupported-link-type",
            SkipReason::NonIp => "non-ip",
            SkipReason::UnsupportedTransport => "unsupported-transport",
            SkipReason::Fragment => "fragment",
            SkipReason::Malformed => "malformed",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decodes link, network and transport headers of one captured frame.
///
/// Never panics: any inconsistency between header length fields and the
/// captured bytes yields `Err(SkipReason::Malformed)`.
pub fn decode_packet(pkt: &RawPacket, link_type: u32) -> Result<DecodedPacket, SkipReason> {
    let frame = &pkt.frame[..];
    let l3 = match link_type {
        LINKTYPE_ETHERNET => strip_ethernet(frame)?,
        LINKTYPE_RAW | LINKTYPE_RAW_BSD | LINKTYPE_IPV4 | LINKTYPE_IPV6 => frame,
        _ => return Err(SkipReason::UnsupportedLinkType),
    };
    let net = match l3.first().map(|b| b >> 4) {
        Some(4) => parse_ipv4(l3)?,
        Some(6) => parse_ipv6(l3)?,
        Some(_) if link_type != LINKTYPE_ETHERNET => return Err(SkipReason::NonIp),
        _ => return Err(SkipReason::Malformed),
    };
    let transport = &l3[net.header_len..net.end];
    let declared_transport_len = net.declared_len - net.header_len;
    let (src_port, dst_port, thl, flags) = match net.proto {
        PROTO_TCP => {
            if transport.len() < 20 || declared_transport_len < 20 {
                return Err(SkipReason::Malformed);
            }
            let thl = ((transport[12] >> 4) as usize) * 4;
            if thl < 20 || thl > transport.len() || thl > declared_transport_len {
                return Err(SkipReason::Malformed);
            }
            (
                u16::from_be_bytes([transport[0], transport[1]]),
                u16::from_be_bytes([transport[2], transport[3]]),
                thl,
                TcpFlags(transport[13]),
            )
        }
        PROTO_UDP => {
            if transport.len() < 8 || declared_transport_len < 8 {
                return Err(SkipReason::Malformed);
            }
            let udp_len = u16::from_be_bytes([transport[4], transport[5]]) as usize;
            // Zero is legal for jumbograms; otherwise it must cover the header.
            if udp_len != 0 && udp_len < 8 {
                return Err(SkipReason::Malformed);
            }
            (
                u16::from_be_bytes([transport[0], transport[1]]),
                u16::from_be_bytes([transport[2], transport[3]]),
                8,
                TcpFlags::empty(),
            )
        }
        _ => return Err(SkipReason::UnsupportedTransport),
    };
    Ok(DecodedPacket {
        timestamp: pkt.timestamp(),
        tuple: FiveTuple {
            src_addr: net.src,
            dst_addr: net.dst,
            src_port,
            dst_port,
            proto: net.proto,
        },
        ip_header_len: net.header_len as u16,
        transport_header_len: thl as u16,
        payload_len: (declared_transport_len - thl) as u32,
        tcp_flags: flags,
        payload: transport[thl..].to_vec(),
    })
}

fn strip_ethernet(frame: &[u8]) -> Result<&[u8], SkipReason> {
    if frame.len() < 14 {
        return Err(SkipReason::Malformed);
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut off = 14;
    if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if frame.len() < 18 {
            return Err(SkipReason::Malformed);
        }
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        off = 18;
    }
    match ethertype {
        ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => Ok(&frame[off..]),
        _ => Err(SkipReason::NonIp),
    }
}

struct NetLayer {
    src: IpAddr,
    dst: IpAddr,
    proto: u8,
    header_len: usize,
    /// Total length declared by the IP header (header + transport).
    declared_len: usize,
    /// End of usable bytes in the l3 slice: min(declared, captured).
    end: usize,
}

fn parse_ipv4(b: &[u8]) -> Result<NetLayer, SkipReason> {
    if b.len() < 20 {
        return Err(SkipReason::Malformed);
    }
    let ihl = ((b[0] & 0x0f) as usize) * 4;
    let total = u16::from_be_bytes([b[2], b[3]]) as usize;
    if ihl < 20 || ihl > b.len() || total < ihl {
        return Err(SkipReason::Malformed);
    }
    let frag_offset = u16::from_be_bytes([b[6], b[7]]) & 0x1fff;
    if frag_offset != 0 {
        return Err(SkipReason::Fragment);
    }
    let src = IpAddr::V4(Ipv4Addr::new(b[12], b[13], b[14], b[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(b[16], b[17], b[18], b[19]));
    Ok(NetLayer {
        src,
        dst,
        proto: b[9],
        header_len: ihl,
        declared_len: total,
        // trailing Ethernet padding is cut here
        end: total.min(b.len()),
    })
}

fn parse_ipv6(b: &[u8]) -> Result<NetLayer, SkipReason> {
    if b.len() < 40 {
        return Err(SkipReason::Malformed);
    }
    let payload_len = u16::from_be_bytes([b[4], b[5]]) as usize;
    let declared = 40 + payload_len;
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&b[8..24]);
    dst.copy_from_slice(&b[24..40]);

    let mut next = b[6];
    let mut off = 40;
    let mut seen = 0;
    loop {
        match next {
            // hop-by-hop, routing, destination options, mobility
            0 | 43 | 60 | 135 | 139 | 140 => {
                seen += 1;
                if seen > MAX_IPV6_EXTENSIONS || off + 8 > b.len() {
                    return Err(SkipReason::Malformed);
                }
                let len = (b[off + 1] as usize + 1) * 8;
                next = b[off];
                off += len;
            }
            44 => {
                seen += 1;
                if seen > MAX_IPV6_EXTENSIONS || off + 8 > b.len() {
                    return Err(SkipReason::Malformed);
                }
                let frag_offset = u16::from_be_bytes([b[off + 2], b[off + 3]]) >> 3;
                if frag_offset != 0 {
                    return Err(SkipReason::Fragment);
                }
                next = b[off];
                off += 8;
            }
            // authentication header: length in 4-byte units, minus 2
            51 => {
                seen += 1;
                if seen > MAX_IPV6_EXTENSIONS || off + 8 > b.len() {
                    return Err(SkipReason::Malformed);
                }
                let len = (b[off + 1] as usize + 2) * 4;
                next = b[off];
                off += len;
            }
            _ => break,
        }
        if off > declared || off > b.len() {
            return Err(SkipReason::Malformed);
        }
    }
    if off > declared {
        return Err(SkipReason::Malformed);
    }
    Ok(NetLayer {
        src: IpAddr::V6(Ipv6Addr::from(src)),
        dst: IpAddr::V6(Ipv6Addr::from(dst)),
        proto: next,
        header_len: off,
        declared_len: declared,
        end: declared.min(b.len()),
    })
}
