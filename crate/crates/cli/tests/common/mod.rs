#![allow(dead_code)]

use std::fs;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netml_core::capture::{craft_packet, write_capture, CaptureHeader, FiveTuple, PacketSpec, Resolution, LINKTYPE_ETHERNET};

pub const SYN: u8 = 0x02;
pub const FIN: u8 = 0x01;
pub const PSH: u8 = 0x08;
pub const ACK: u8 = 0x10;

pub fn tuple(src: IpAddr, sport: u16, dst: IpAddr, dport: u16) -> FiveTuple {
    FiveTuple { src_addr: src, dst_addr: dst, src_port: sport, dst_port: dport, proto: 0 }
}

pub fn ip(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(a, b, c, d))
}

pub fn to_pcap(mut specs: Vec<PacketSpec>) -> Vec<u8> {
    specs.sort_by(|x, y| x.timestamp().total_cmp(&y.timestamp()));
    let pkts: Vec<_> = specs.iter().map(|s| craft_packet(s).unwrap()).collect();
    write_capture(&CaptureHeader::new(LINKTYPE_ETHERNET, Resolution::Micros), &pkts)
}

/// Traffic shapes that are easy to tell apart from metadata alone.
#[derive(Debug, Clone, Copy)]
pub enum Shape {
    /// Short TCP exchange with small payloads.
    Chat,
    /// UDP bursts of large datagrams.
    Stream,
    /// TCP with a single mid-size upload.
    Beacon,
}

/// `n` flows of one shape, each from its own source address. `subnet`
/// keeps addresses distinct across captures.
pub fn shaped_capture(shape: Shape, n: usize, subnet: u8) -> Vec<u8> {
    let mut v = Vec::new();
    for i in 0..n {
        let src = ip(10, subnet, (i / 200) as u8, (i % 200) as u8 + 1);
        let dst = ip(192, 0, 2, subnet);
        let t0 = 1000 + i as u32 * 2;
        let jitter = (i as u32 * 37) % 900;
        match shape {
            Shape::Chat => {
                let t = tuple(src, 30000 + i as u16, dst, 5222);
                v.push(PacketSpec::tcp(t, SYN, &[], t0, 0));
                v.push(PacketSpec::tcp(t.reversed(), SYN | ACK, &[], t0, 2_000 + jitter));
                for k in 0..4u32 {
                    let len = 40 + (i + k as usize) % 20;
                    v.push(PacketSpec::tcp(t, PSH | ACK, &vec![b'c'; len], t0, 10_000 + k * 50_000));
                    v.push(PacketSpec::tcp(t.reversed(), PSH | ACK, &vec![b'r'; len + 8], t0, 30_000 + k * 50_000 + jitter));
                }
                v.push(PacketSpec::tcp(t, FIN | ACK, &[], t0, 400_000));
                v.push(PacketSpec::tcp(t.reversed(), FIN | ACK, &[], t0, 401_000));
            }
            Shape::Stream => {
                let t = tuple(src, 40000 + i as u16, dst, 3478);
                for k in 0..12u32 {
                    let len = 900 + (i * 7 + k as usize) % 300;
                    v.push(PacketSpec::udp(t.reversed(), &vec![b's'; len], t0, k * 20_000 + jitter));
                }
                v.push(PacketSpec::udp(t, &[b'q'; 20], t0, 0));
            }
            Shape::Beacon => {
                let t = tuple(src, 50000 + i as u16, dst, 8443);
                v.push(PacketSpec::tcp(t, SYN, &[], t0, 0));
                v.push(PacketSpec::tcp(t.reversed(), SYN | ACK, &[], t0, 80_000 + jitter));
                v.push(PacketSpec::tcp(t, ACK, &[], t0, 160_000));
                v.push(PacketSpec::tcp(t, PSH | ACK, &vec![b'b'; 300 + i % 50], t0, 170_000));
                v.push(PacketSpec::tcp(t.reversed(), ACK, &[], t0, 250_000));
                v.push(PacketSpec::tcp(t, FIN | ACK, &[], t0, 900_000));
            }
        }
    }
    // chat flows are sorted into time order but interleave across flows
    v.sort_by(|x, y| x.timestamp().total_cmp(&y.timestamp()));
    to_pcap(v)
}

/// Three labeled traces plus a manifest naming them; returns the capture
/// paths and the manifest path.
pub fn corpus(dir: &Path, flows_per_trace: usize) -> (Vec<PathBuf>, PathBuf) {
    let traces = [("chat_gtalk.pcap", Shape::Chat, 1u8), ("vpn_stream.pcap", Shape::Stream, 2), ("malware_zeus.pcap", Shape::Beacon, 3)];
    let mut paths = Vec::new();
    for (name, shape, subnet) in traces {
        let p = dir.join(name);
        fs::write(&p, shaped_capture(shape, flows_per_trace, subnet)).unwrap();
        paths.push(p);
    }
    let manifest = serde_json::json!({
        "entries": [
            {"pattern": "chat_*.pcap", "dataset": "vpn", "top": "nonVPN", "mid": "chat"},
            {"pattern": "vpn_*.pcap", "dataset": "vpn", "top": "VPN", "mid": "streaming"},
            {"pattern": "malware_*.pcap", "dataset": "mal", "top": "Malware", "mid": "zeus"}
        ]
    });
    let mp = dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    (paths, mp)
}

pub fn netml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netml")).args(args).env_remove("NETML_CONFIG").output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
