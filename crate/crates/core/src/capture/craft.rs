//! Builds Ethernet frames from a packet description. Used for fixtures and
//! for round-trip testing of the decoder.

use std::net::IpAddr;

use super::decode::{DecodedPacket, FiveTuple, TcpFlags, PROTO_TCP, PROTO_UDP};
use super::pcap::{RawPacket, Resolution};
use super::CaptureError;

pub const ETHERNET_HEADER_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketSpec {
    pub tuple: FiveTuple,
    pub tcp_flags: TcpFlags,
    pub payload: Vec<u8>,
    pub ts_seconds: u32,
    pub ts_micros: u32,
}

impl PacketSpec {
    pub fn tcp(tuple: FiveTuple, flags: u8, payload: &[u8], ts_seconds: u32, ts_micros: u32) -> Self {
        PacketSpec {
            tuple: FiveTuple { proto: PROTO_TCP, ..tuple },
            tcp_flags: TcpFlags(flags),
            payload: payload.to_vec(),
            ts_seconds,
            ts_micros,
        }
    }

    pub fn udp(tuple: FiveTuple, payload: &[u8], ts_seconds: u32, ts_micros: u32) -> Self {
        PacketSpec {
            tuple: FiveTuple { proto: PROTO_UDP, ..tuple },
            tcp_flags: TcpFlags::empty(),
            payload: payload.to_vec(),
            ts_seconds,
            ts_micros,
        }
    }

    pub fn timestamp(&self) -> f64 {
        self.ts_seconds as f64 + self.ts_micros as f64 / 1e6
    }

    /// Whether `pkt` carries exactly the fields described by this spec.
    pub fn matches(&self, pkt: &DecodedPacket) -> bool {
        pkt.tuple == self.tuple
            && pkt.tcp_flags == self.tcp_flags
            && pkt.payload == self.payload
            && pkt.payload_len as usize == self.payload.len()
            && pkt.timestamp == self.timestamp()
    }

    fn ip_header_len(&self) -> usize {
        match self.tuple.src_addr {
            IpAddr::V4(_) => 20,
            IpAddr::V6(_) => 40,
        }
    }

    fn transport_header_len(&self) -> usize {
        if self.tuple.proto == PROTO_TCP {
            20
        } else {
            8
        }
    }

    /// Wire length of the Ethernet frame this spec produces.
    pub fn frame_len(&self) -> usize {
        ETHERNET_HEADER_LEN + self.ip_header_len() + self.transport_header_len() + self.payload.len()
    }
}

/// Ones' complement sum used by the IPv4, TCP and UDP checksums.
fn checksum_add(mut sum: u32, data: &[u8]) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    sum
}

fn checksum_finish(mut sum: u32) -> u16 {
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Builds an Ethernet frame from `spec`. Checksums are valid.
pub fn craft_packet(spec: &PacketSpec) -> Result<RawPacket, CaptureError> {
    let t = &spec.tuple;
    if t.proto != PROTO_TCP && t.proto != PROTO_UDP {
        return Err(CaptureError::InvalidSpec(format!("protocol {} is not TCP or UDP", t.proto)));
    }
    if t.proto == PROTO_UDP && spec.tcp_flags != TcpFlags::empty() {
        return Err(CaptureError::InvalidSpec("UDP packet with TCP flags".into()));
    }
    if spec.ts_micros >= 1_000_000 {
        return Err(CaptureError::InvalidSpec(format!("ts_micros {} out of range", spec.ts_micros)));
    }
    let v4 = match (t.src_addr, t.dst_addr) {
        (IpAddr::V4(_), IpAddr::V4(_)) => true,
        (IpAddr::V6(_), IpAddr::V6(_)) => false,
        _ => return Err(CaptureError::InvalidSpec("mixed address families".into())),
    };
    let thl = spec.transport_header_len();
    let l4_len = thl + spec.payload.len();
    let max_l4 = if v4 { 65535 - 20 } else { 65535 };
    if l4_len > max_l4 {
        return Err(CaptureError::InvalidSpec(format!("payload of {} bytes too large", spec.payload.len())));
    }

    let mut frame = Vec::with_capacity(spec.frame_len());
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
    frame.extend_from_slice(if v4 { &[0x08, 0x00] } else { &[0x86, 0xdd] });

    // pseudo-header sum for the transport checksum
    let mut pseudo = 0u32;
    match (t.src_addr, t.dst_addr) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let total = (20 + l4_len) as u16;
            let mut ip = [0u8; 20];
            ip[0] = 0x45;
            ip[2..4].copy_from_slice(&total.to_be_bytes());
            ip[6] = 0x40; // don't fragment
            ip[8] = 64;
            ip[9] = t.proto;
            ip[12..16].copy_from_slice(&s.octets());
            ip[16..20].copy_from_slice(&d.octets());
            let csum = checksum_finish(checksum_add(0, &ip));
            ip[10..12].copy_from_slice(&csum.to_be_bytes());
            frame.extend_from_slice(&ip);
            pseudo = checksum_add(pseudo, &s.octets());
            pseudo = checksum_add(pseudo, &d.octets());
            pseudo += t.proto as u32 + l4_len as u32;
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            let mut ip = [0u8; 40];
            ip[0] = 0x60;
            ip[4..6].copy_from_slice(&(l4_len as u16).to_be_bytes());
            ip[6] = t.proto;
            ip[7] = 64;
            ip[8..24].copy_from_slice(&s.octets());
            ip[24..40].copy_from_slice(&d.octets());
            frame.extend_from_slice(&ip);
            pseudo = checksum_add(pseudo, &s.octets());
            pseudo = checksum_add(pseudo, &d.octets());
            pseudo += t.proto as u32 + l4_len as u32;
        }
        _ => unreachable!("families checked above"),
    }

    let l4_start = frame.len();
    frame.extend_from_slice(&t.src_port.to_be_bytes());
    frame.extend_from_slice(&t.dst_port.to_be_bytes());
    if t.proto == PROTO_TCP {
        frame.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0]); // seq, ack
        frame.push(0x50);
        frame.push(spec.tcp_flags.0);
        frame.extend_from_slice(&[0xff, 0xff, 0, 0, 0, 0]); // window, csum, urg
    } else {
        frame.extend_from_slice(&(l4_len as u16).to_be_bytes());
        frame.extend_from_slice(&[0, 0]);
    }
    frame.extend_from_slice(&spec.payload);
    let mut csum = checksum_finish(checksum_add(pseudo, &frame[l4_start..]));
    if t.proto == PROTO_UDP && csum == 0 {
        csum = 0xffff;
    }
    let csum_at = l4_start + if t.proto == PROTO_TCP { 16 } else { 6 };
    frame[csum_at..csum_at + 2].copy_from_slice(&csum.to_be_bytes());

    Ok(RawPacket {
        ts_seconds: spec.ts_seconds,
        ts_fraction: spec.ts_micros,
        resolution: Resolution::Micros,
        captured_len: frame.len() as u32,
        original_len: frame.len() as u32,
        frame,
    })
}
