//! Fixtures shared by the benchmarks.

use std::net::{IpAddr, Ipv4Addr};

use netml_core::capture::{craft_packet, write_capture, CaptureHeader, FiveTuple, PacketSpec, Resolution, LINKTYPE_ETHERNET};

/// `flows` TCP flows of `packets` data packets each, alternating direction,
/// interleaved in time order.
pub fn capture(flows: usize, packets: usize) -> Vec<u8> {
    let mut specs = Vec::with_capacity(flows * (packets + 1));
    for f in 0..flows {
        let t = FiveTuple {
            src_addr: IpAddr::V4(Ipv4Addr::new(10, (f >> 16) as u8, (f >> 8) as u8, f as u8)),
            dst_addr: IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1)),
            src_port: 1024 + (f % 60000) as u16,
            dst_port: 443,
            proto: 0,
        };
        specs.push(PacketSpec::tcp(t, 0x02, &[], 0, f as u32));
        for p in 0..packets {
            let dir = if p % 2 == 0 { t } else { t.reversed() };
            let len = 64 + (f * 31 + p * 17) % 1200;
            specs.push(PacketSpec::tcp(dir, 0x18, &vec![0xab; len], (p / 10) as u32, (p % 10) as u32 * 1000 + f as u32));
        }
    }
    specs.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
    let pkts: Vec<_> = specs.iter().map(|s| craft_packet(s).expect("valid spec")).collect();
    write_capture(&CaptureHeader::new(LINKTYPE_ETHERNET, Resolution::Micros), &pkts)
}
