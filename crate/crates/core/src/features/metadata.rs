//! Protocol-independent flow statistics and compact count histograms.
//!
//! Everything here is computed from the stored (capped) packets only, except
//! `time_length`, which spans the flow's full observed lifetime.

use serde::{Deserialize, Serialize};

use crate::capture::{DecodedPacket, TcpFlags};
use crate::flow::Flow;

pub const PLD_BINS: usize = 16;
pub const PLD_BIN_WIDTH: u32 = 32;
pub const HDR_BINS: usize = 12;
pub const HDR_BIN_WIDTH: u32 = 4;
pub const INTERVAL_BINS: usize = 16;
/// Lower edges (ms) of interval bins 1..16; bin 0 holds gaps below 1 ms.
pub const INTERVAL_EDGES_MS: [u64; INTERVAL_BINS - 1] =
    [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384];
pub const FLAG_COUNTS: usize = 5;
/// Payloads strictly above this many bytes count toward `pld_bin_128`.
pub const PLD_BIN_128_THRESHOLD: u32 = 128;
/// Payloads strictly above the last histogram edge count toward `pld_bin_inf`.
pub const PLD_BIN_INF_THRESHOLD: u32 = PLD_BIN_WIDTH * (PLD_BINS as u32 - 1);
/// Headers at or below this many bytes count toward `hdr_bin_40`.
pub const HDR_BIN_40_THRESHOLD: u32 = 40;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetadataFeatures {
    pub src_prt: u16,
    pub dst_prt: u16,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub num_pkts_in: u64,
    pub num_pkts_out: u64,
    pub time_length: f64,
    pub pld_max: u64,
    pub pld_mean: f64,
    pub pld_median: f64,
    pub pld_var: f64,
    pub pld_distinct: u64,
    pub pld_bin_128: u64,
    pub pld_bin_inf: u64,
    pub hdr_mean: f64,
    pub hdr_distinct: u64,
    pub hdr_bin_40: u64,
    pub rev_pld_max: u64,
    pub rev_pld_mean: f64,
    pub rev_pld_var: f64,
    pub rev_pld_distinct: u64,
    pub rev_hdr_mean: f64,
    pub rev_hdr_distinct: u64,
    pub pld_ccnt: [u64; PLD_BINS],
    pub rev_pld_ccnt: [u64; PLD_BINS],
    pub hdr_ccnt: [u64; HDR_BINS],
    pub rev_hdr_ccnt: [u64; HDR_BINS],
    pub intervals_ccnt: [u64; INTERVAL_BINS],
    pub rev_intervals_ccnt: [u64; INTERVAL_BINS],
    pub ack_psh_rst_syn_fin_cnt: [u64; FLAG_COUNTS],
    pub rev_ack_psh_rst_syn_fin_cnt: [u64; FLAG_COUNTS],
}

/// Feature names and widths in column order.
pub const METADATA_FIELDS: [(&str, usize); 31] = [
    ("src_prt", 1),
    ("dst_prt", 1),
    ("bytes_in", 1),
    ("bytes_out", 1),
    ("num_pkts_in", 1),
    ("num_pkts_out", 1),
    ("time_length", 1),
    ("pld_max", 1),
    ("pld_mean", 1),
    ("pld_median", 1),
    ("pld_var", 1),
    ("pld_distinct", 1),
    ("pld_bin_128", 1),
    ("pld_bin_inf", 1),
    ("hdr_mean", 1),
    ("hdr_distinct", 1),
    ("hdr_bin_40", 1),
    ("rev_pld_max", 1),
    ("rev_pld_mean", 1),
    ("rev_pld_var", 1),
    ("rev_pld_distinct", 1),
    ("rev_hdr_mean", 1),
    ("rev_hdr_distinct", 1),
    ("pld_ccnt", PLD_BINS),
    ("rev_pld_ccnt", PLD_BINS),
    ("hdr_ccnt", HDR_BINS),
    ("rev_hdr_ccnt", HDR_BINS),
    ("intervals_ccnt", INTERVAL_BINS),
    ("rev_intervals_ccnt", INTERVAL_BINS),
    ("ack_psh_rst_syn_fin_cnt", FLAG_COUNTS),
    ("rev_ack_psh_rst_syn_fin_cnt", FLAG_COUNTS),
];

pub const METADATA_COLUMNS: usize = 121;

const _: () = {
    let mut total = 0;
    let mut i = 0;
    while i < METADATA_FIELDS.len() {
        total += METADATA_FIELDS[i].1;
        i += 1;
    }
    assert!(total == METADATA_COLUMNS);
};

/// Expanded column names: array features become `name_0 .. name_k`.
pub fn metadata_column_names() -> Vec<String> {
    let mut out = Vec::with_capacity(METADATA_COLUMNS);
    for (name, width) in METADATA_FIELDS {
        if width == 1 {
            out.push(name.to_string());
        } else {
            out.extend((0..width).map(|i| format!("{name}_{i}")));
        }
    }
    out
}

impl MetadataFeatures {
    /// Flattens into the 121 numeric columns in manifest order.
    pub fn to_columns(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(METADATA_COLUMNS);
        v.extend([
            self.src_prt as f64,
            self.dst_prt as f64,
            self.bytes_in as f64,
            self.bytes_out as f64,
            self.num_pkts_in as f64,
            self.num_pkts_out as f64,
            self.time_length,
            self.pld_max as f64,
            self.pld_mean,
            self.pld_median,
            self.pld_var,
            self.pld_distinct as f64,
            self.pld_bin_128 as f64,
            self.pld_bin_inf as f64,
            self.hdr_mean,
            self.hdr_distinct as f64,
            self.hdr_bin_40 as f64,
            self.rev_pld_max as f64,
            self.rev_pld_mean,
            self.rev_pld_var,
            self.rev_pld_distinct as f64,
            self.rev_hdr_mean,
            self.rev_hdr_distinct as f64,
        ]);
        let arrays: [&[u64]; 8] = [
            &self.pld_ccnt,
            &self.rev_pld_ccnt,
            &self.hdr_ccnt,
            &self.rev_hdr_ccnt,
            &self.intervals_ccnt,
            &self.rev_intervals_ccnt,
            &self.ack_psh_rst_syn_fin_cnt,
            &self.rev_ack_psh_rst_syn_fin_cnt,
        ];
        for a in arrays {
            v.extend(a.iter().map(|&c| c as f64));
        }
        debug_assert_eq!(v.len(), METADATA_COLUMNS);
        v
    }
}

/// Summary of one direction's stored packets.
#[derive(Debug, Default)]
struct DirectionStats {
    count: u64,
    bytes: u64,
    pld_max: u64,
    pld_mean: f64,
    pld_median: f64,
    pld_var: f64,
    pld_distinct: u64,
    pld_bin_128: u64,
    pld_bin_inf: u64,
    hdr_mean: f64,
    hdr_distinct: u64,
    hdr_bin_40: u64,
    pld_ccnt: [u64; PLD_BINS],
    hdr_ccnt: [u64; HDR_BINS],
    intervals_ccnt: [u64; INTERVAL_BINS],
    flags: [u64; FLAG_COUNTS],
}

fn mean(xs: &[u32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

fn distinct(xs: &[u32]) -> u64 {
    let mut s = xs.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len() as u64
}

pub fn payload_bin(len: u32) -> usize {
    ((len / PLD_BIN_WIDTH) as usize).min(PLD_BINS - 1)
}

pub fn header_bin(len: u32) -> usize {
    ((len / HDR_BIN_WIDTH) as usize).min(HDR_BINS - 1)
}

/// Bin for an inter-arrival gap given in whole microseconds.
pub fn interval_bin(gap_us: u64) -> usize {
    INTERVAL_EDGES_MS.iter().take_while(|&&e| gap_us >= e * 1000).count()
}

fn gap_micros(earlier: f64, later: f64) -> u64 {
    ((later - earlier) * 1e6).round().max(0.0) as u64
}

impl DirectionStats {
    fn from_packets(pkts: &[DecodedPacket]) -> Self {
        let mut s = DirectionStats::default();
        if pkts.is_empty() {
            return s;
        }
        let plds: Vec<u32> = pkts.iter().map(|p| p.payload_len).collect();
        let hdrs: Vec<u32> = pkts.iter().map(|p| p.header_len()).collect();
        s.count = pkts.len() as u64;
        s.bytes = plds.iter().map(|&x| x as u64).sum();
        s.pld_max = plds.iter().copied().max().unwrap_or(0) as u64;
        s.pld_mean = mean(&plds);
        s.pld_var = plds.iter().map(|&x| (x as f64 - s.pld_mean).powi(2)).sum::<f64>() / plds.len() as f64;
        let mut sorted = plds.clone();
        sorted.sort_unstable();
        let n = sorted.len();
        s.pld_median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
        };
        s.pld_distinct = distinct(&plds);
        s.pld_bin_128 = plds.iter().filter(|&&x| x > PLD_BIN_128_THRESHOLD).count() as u64;
        s.pld_bin_inf = plds.iter().filter(|&&x| x > PLD_BIN_INF_THRESHOLD).count() as u64;
        s.hdr_mean = mean(&hdrs);
        s.hdr_distinct = distinct(&hdrs);
        s.hdr_bin_40 = hdrs.iter().filter(|&&x| x <= HDR_BIN_40_THRESHOLD).count() as u64;
        for &x in &plds {
            s.pld_ccnt[payload_bin(x)] += 1;
        }
        for &x in &hdrs {
            s.hdr_ccnt[header_bin(x)] += 1;
        }
        for w in pkts.windows(2) {
            s.intervals_ccnt[interval_bin(gap_micros(w[0].timestamp, w[1].timestamp))] += 1;
        }
        for p in pkts {
            let f = p.tcp_flags;
            for (i, bit) in [TcpFlags::ACK, TcpFlags::PSH, TcpFlags::RST, TcpFlags::SYN, TcpFlags::FIN]
                .into_iter()
                .enumerate()
            {
                if f.contains(bit) {
                    s.flags[i] += 1;
                }
            }
        }
        s
    }
}

/// Computes the 31 metadata features of a flow.
pub fn extract_metadata(flow: &Flow) -> MetadataFeatures {
    let fwd = DirectionStats::from_packets(&flow.fwd_pkts);
    let rev = DirectionStats::from_packets(&flow.rev_pkts);
    MetadataFeatures {
        src_prt: flow.key.endpoint_a.port,
        dst_prt: flow.key.endpoint_b.port,
        bytes_in: fwd.bytes,
        bytes_out: rev.bytes,
        num_pkts_in: fwd.count,
        num_pkts_out: rev.count,
        time_length: (flow.time_end - flow.time_start).max(0.0),
        pld_max: fwd.pld_max,
        pld_mean: fwd.pld_mean,
        pld_median: fwd.pld_median,
        pld_var: fwd.pld_var,
        pld_distinct: fwd.pld_distinct,
        pld_bin_128: fwd.pld_bin_128,
        pld_bin_inf: fwd.pld_bin_inf,
        hdr_mean: fwd.hdr_mean,
        hdr_distinct: fwd.hdr_distinct,
        hdr_bin_40: fwd.hdr_bin_40,
        rev_pld_max: rev.pld_max,
        rev_pld_mean: rev.pld_mean,
        rev_pld_var: rev.pld_var,
        rev_pld_distinct: rev.pld_distinct,
        rev_hdr_mean: rev.hdr_mean,
        rev_hdr_distinct: rev.hdr_distinct,
        pld_ccnt: fwd.pld_ccnt,
        rev_pld_ccnt: rev.pld_ccnt,
        hdr_ccnt: fwd.hdr_ccnt,
        rev_hdr_ccnt: rev.hdr_ccnt,
        intervals_ccnt: fwd.intervals_ccnt,
        rev_intervals_ccnt: rev.intervals_ccnt,
        ack_psh_rst_syn_fin_cnt: fwd.flags,
        rev_ack_psh_rst_syn_fin_cnt: rev.flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{craft_packet, decode_packet, FiveTuple, PacketSpec, LINKTYPE_ETHERNET};
    use crate::flow::{FlowConfig, FlowTable};

    fn flow_of(specs: Vec<PacketSpec>) -> Flow {
        let mut t = FlowTable::new(FlowConfig::default());
        for s in specs {
            t.observe(decode_packet(&craft_packet(&s).unwrap(), LINKTYPE_ETHERNET).unwrap());
        }
        t.finalize().pop().unwrap()
    }

    fn tuple() -> FiveTuple {
        FiveTuple {
            src_addr: "192.168.0.2".parse().unwrap(),
            dst_addr: "192.168.0.3".parse().unwrap(),
            src_port: 5555,
            dst_port: 7777,
            proto: 17,
        }
    }

    #[test]
    fn column_count_and_names() {
        let names = metadata_column_names();
        assert_eq!(names.len(), 121);
        assert_eq!(names[23], "pld_ccnt_0");
        assert_eq!(names[120], "rev_ack_psh_rst_syn_fin_cnt_4");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 121);
        assert_eq!(MetadataFeatures::default().to_columns().len(), 121);
    }

    #[test]
    fn bins() {
        assert_eq!(payload_bin(0), 0);
        assert_eq!(payload_bin(31), 0);
        assert_eq!(payload_bin(32), 1);
        assert_eq!(payload_bin(479), 14);
        assert_eq!(payload_bin(480), 15);
        assert_eq!(payload_bin(1460), 15);
        assert_eq!(header_bin(28), 7);
        assert_eq!(header_bin(40), 10);
        assert_eq!(header_bin(44), 11);
        assert_eq!(header_bin(60), 11);
        assert_eq!(interval_bin(0), 0);
        assert_eq!(interval_bin(999), 0);
        assert_eq!(interval_bin(1000), 1);
        assert_eq!(interval_bin(10_000), 4);
        assert_eq!(interval_bin(16_383_999), 14);
        assert_eq!(interval_bin(16_384_000), 15);
        assert_eq!(interval_bin(u64::MAX / 2), 15);
    }

    #[test]
    fn single_forward_packet() {
        let f = flow_of(vec![PacketSpec::udp(tuple(), &[1; 100], 5, 0)]);
        let m = extract_metadata(&f);
        assert_eq!(m.num_pkts_in, 1);
        assert_eq!(m.num_pkts_out, 0);
        assert_eq!(m.pld_max, 100);
        assert_eq!(m.pld_median, 100.0);
        assert_eq!(m.pld_var, 0.0);
        assert_eq!(m.rev_pld_max, 0);
        assert_eq!(m.rev_pld_ccnt, [0; 16]);
        assert_eq!(m.rev_hdr_ccnt, [0; 12]);
        assert_eq!(m.rev_intervals_ccnt, [0; 16]);
        assert_eq!(m.intervals_ccnt, [0; 16]);
        assert_eq!(m.hdr_mean, 28.0);
        assert_eq!(m.hdr_ccnt[7], 1);
        assert_eq!(m.time_length, 0.0);
    }

    #[test]
    fn four_packet_flow_by_hand() {
        // fwd payloads 0 and 100, rev payloads 50 and 50, 10 ms apart
        let t = tuple();
        let f = flow_of(vec![
            PacketSpec::udp(t, &[], 10, 0),
            PacketSpec::udp(t.reversed(), &[0; 50], 10, 10_000),
            PacketSpec::udp(t, &[0; 100], 10, 20_000),
            PacketSpec::udp(t.reversed(), &[0; 50], 10, 30_000),
        ]);
        let m = extract_metadata(&f);
        assert_eq!(m.bytes_in, 100);
        assert_eq!(m.bytes_out, 100);
        assert_eq!((m.num_pkts_in, m.num_pkts_out), (2, 2));
        let mut pld = [0u64; 16];
        pld[0] = 1; // 0 bytes
        pld[3] = 1; // 100 bytes in [96,128)
        assert_eq!(m.pld_ccnt, pld);
        let mut rev_pld = [0u64; 16];
        rev_pld[1] = 2; // 50 bytes in [32,64)
        assert_eq!(m.rev_pld_ccnt, rev_pld);
        // same-direction gaps are 20 ms: bin [16,32)
        let mut iv = [0u64; 16];
        iv[5] = 1;
        assert_eq!(m.intervals_ccnt, iv);
        assert_eq!(m.rev_intervals_ccnt, iv);
        assert_eq!(m.pld_mean, 50.0);
        assert_eq!(m.pld_median, 50.0);
        assert_eq!(m.pld_var, 2500.0);
        assert_eq!(m.pld_distinct, 2);
        assert_eq!(m.rev_pld_distinct, 1);
        assert_eq!(m.rev_pld_var, 0.0);
        assert!((m.time_length - 0.03).abs() < 1e-9);
    }

    #[test]
    fn time_length_is_end_minus_start() {
        let t = tuple();
        let f = flow_of(vec![PacketSpec::udp(t, b"a", 10, 0), PacketSpec::udp(t, b"b", 10, 500_000)]);
        assert_eq!(extract_metadata(&f).time_length, 0.5);
    }

    #[test]
    fn histogram_mass() {
        let t = tuple();
        let specs: Vec<PacketSpec> = (0..70u32)
            .map(|i| {
                let tt = if i % 3 == 1 { t.reversed() } else { t };
                PacketSpec::udp(tt, &vec![0; (i * 37 % 700) as usize], i, 0)
            })
            .collect();
        let f = flow_of(specs);
        let m = extract_metadata(&f);
        assert_eq!(m.pld_ccnt.iter().sum::<u64>(), m.num_pkts_in);
        assert_eq!(m.hdr_ccnt.iter().sum::<u64>(), m.num_pkts_in);
        assert_eq!(m.rev_pld_ccnt.iter().sum::<u64>(), m.num_pkts_out);
        assert_eq!(m.intervals_ccnt.iter().sum::<u64>(), m.num_pkts_in - 1);
        assert_eq!(m.rev_intervals_ccnt.iter().sum::<u64>(), m.num_pkts_out - 1);
        assert_eq!(m.num_pkts_in, 47);
        assert_eq!(m.num_pkts_out, 23);
    }
}
