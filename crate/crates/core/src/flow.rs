//! Bidirectional flow assembly.
//!
//! Packets are grouped by five-tuple regardless of direction. The sender of
//! a flow's first packet is the initiator (`endpoint_a`) and its packets fill
//! `fwd_pkts`. At most `per_direction_packet_cap` packets are stored per
//! direction; later packets only advance `time_end` and a post-cap counter.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::capture::{DecodedPacket, PROTO_TCP};

pub const DEFAULT_PACKET_CAP: usize = 48;
pub const DEFAULT_IDLE_TIMEOUT: f64 = 60.0;
pub const DEFAULT_MAX_FLOWS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub idle_timeout_seconds: f64,
    pub max_flows: usize,
    pub per_direction_packet_cap: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            idle_timeout_seconds: DEFAULT_IDLE_TIMEOUT,
            max_flows: DEFAULT_MAX_FLOWS,
            per_direction_packet_cap: DEFAULT_PACKET_CAP,
        }
    }
}

impl FlowConfig {
    /// Output produced with a cap other than 48 is flagged as non-conformant.
    pub fn is_conformant(&self) -> bool {
        self.per_direction_packet_cap == DEFAULT_PACKET_CAP
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

/// Flow identity with the initiator first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub proto: u8,
}

impl FlowKey {
    /// Fixed-width byte encoding used for deterministic ordering.
    pub fn to_bytes(&self) -> [u8; 37] {
        let mut out = [0u8; 37];
        out[0] = self.proto;
        write_endpoint(&mut out[1..19], &self.endpoint_a);
        write_endpoint(&mut out[19..37], &self.endpoint_b);
        out
    }
}

fn write_endpoint(dst: &mut [u8], ep: &Endpoint) {
    let octets = match ep.addr {
        IpAddr::V4(v4) => v4.to_ipv6_mapped().octets(),
        IpAddr::V6(v6) => v6.octets(),
    };
    dst[..16].copy_from_slice(&octets);
    dst[16..18].copy_from_slice(&ep.port.to_be_bytes());
}

/// Direction-independent key: endpoints sorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct LookupKey {
    lo: Endpoint,
    hi: Endpoint,
    proto: u8,
}

impl LookupKey {
    fn new(x: Endpoint, y: Endpoint, proto: u8) -> Self {
        if x <= y {
            LookupKey { lo: x, hi: y, proto }
        } else {
            LookupKey { lo: y, hi: x, proto }
        }
    }

    fn of(p: &DecodedPacket) -> Self {
        let t = &p.tuple;
        LookupKey::new(
            Endpoint { addr: t.src_addr, port: t.src_port },
            Endpoint { addr: t.dst_addr, port: t.dst_port },
            t.proto,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Fin,
    Rst,
    IdleTimeout,
    EndOfCapture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub key: FlowKey,
    pub time_start: f64,
    pub time_end: f64,
    pub fwd_pkts: Vec<DecodedPacket>,
    pub rev_pkts: Vec<DecodedPacket>,
    /// Packets seen after the per-direction cap was reached.
    pub fwd_post_cap: u64,
    pub rev_post_cap: u64,
    pub termination: Termination,
    fin_fwd: bool,
    fin_rev: bool,
}

impl Flow {
    fn start(pkt: DecodedPacket) -> Flow {
        let t = pkt.tuple;
        let key = FlowKey {
            endpoint_a: Endpoint { addr: t.src_addr, port: t.src_port },
            endpoint_b: Endpoint { addr: t.dst_addr, port: t.dst_port },
            proto: t.proto,
        };
        Flow {
            key,
            time_start: pkt.timestamp,
            time_end: pkt.timestamp,
            fwd_pkts: Vec::new(),
            rev_pkts: Vec::new(),
            fwd_post_cap: 0,
            rev_post_cap: 0,
            termination: Termination::EndOfCapture,
            fin_fwd: false,
            fin_rev: false,
        }
    }

    pub fn is_forward(&self, pkt: &DecodedPacket) -> bool {
        pkt.tuple.src_addr == self.key.endpoint_a.addr && pkt.tuple.src_port == self.key.endpoint_a.port
    }

    pub fn stored_packets(&self) -> usize {
        self.fwd_pkts.len() + self.rev_pkts.len()
    }

    pub fn total_packets(&self) -> u64 {
        self.stored_packets() as u64 + self.fwd_post_cap + self.rev_post_cap
    }

    /// Stored packets of both directions in timestamp order (stable on ties:
    /// forward first).
    pub fn packets_in_order(&self) -> Vec<&DecodedPacket> {
        let mut all: Vec<&DecodedPacket> = self.fwd_pkts.iter().chain(self.rev_pkts.iter()).collect();
        all.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap_or(Ordering::Equal));
        all
    }

    fn push(&mut self, pkt: DecodedPacket, cap: usize) {
        let forward = self.is_forward(&pkt);
        if pkt.timestamp > self.time_end {
            self.time_end = pkt.timestamp;
        }
        if pkt.tuple.proto == PROTO_TCP && pkt.tcp_flags.fin() {
            if forward {
                self.fin_fwd = true;
            } else {
                self.fin_rev = true;
            }
        }
        let (list, post) = if forward {
            (&mut self.fwd_pkts, &mut self.fwd_post_cap)
        } else {
            (&mut self.rev_pkts, &mut self.rev_post_cap)
        };
        if list.len() < cap {
            list.push(pkt);
        } else {
            *post += 1;
        }
    }
}

/// Deterministic emission order: `time_start`, then key bytes.
pub fn emission_order(a: &Flow, b: &Flow) -> Ordering {
    a.time_start
        .partial_cmp(&b.time_start)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.key.to_bytes().cmp(&b.key.to_bytes()))
}

/// Single-writer table of open flows.
#[derive(Debug, Default)]
pub struct FlowTable {
    config: FlowConfig,
    open: HashMap<LookupKey, Flow>,
}

impl FlowTable {
    pub fn new(config: FlowConfig) -> Self {
        FlowTable { config, open: HashMap::new() }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn open_flows(&self) -> usize {
        self.open.len()
    }

    /// Adds a packet to its flow. Returns flows completed by this packet
    /// (TCP FIN in both directions or RST) plus any flow force-expired to
    /// respect `max_flows`.
    pub fn observe(&mut self, pkt: DecodedPacket) -> Vec<Flow> {
        let mut emitted = Vec::new();
        let key = LookupKey::of(&pkt);
        if !self.open.contains_key(&key) && self.open.len() >= self.config.max_flows.max(1) {
            if let Some(victim) = self.oldest_idle() {
                let mut f = self.open.remove(&victim).expect("victim is open");
                f.termination = Termination::IdleTimeout;
                emitted.push(f);
            }
        }
        let is_tcp = pkt.tuple.proto == PROTO_TCP;
        let rst = is_tcp && pkt.tcp_flags.rst();
        let cap = self.config.per_direction_packet_cap;
        let flow = self.open.entry(key).or_insert_with(|| Flow::start(pkt.clone()));
        flow.push(pkt, cap);
        let done = if rst {
            Some(Termination::Rst)
        } else if is_tcp && flow.fin_fwd && flow.fin_rev {
            Some(Termination::Fin)
        } else {
            None
        };
        if let Some(term) = done {
            let mut f = self.open.remove(&key).expect("flow just touched");
            f.termination = term;
            emitted.push(f);
        }
        emitted
    }

    fn oldest_idle(&self) -> Option<LookupKey> {
        self.open
            .iter()
            .min_by(|(_, a), (_, b)| {
                a.time_end
                    .partial_cmp(&b.time_end)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.key.to_bytes().cmp(&b.key.to_bytes()))
            })
            .map(|(k, _)| *k)
    }

    /// Emits flows idle for strictly more than the idle timeout.
    pub fn expire(&mut self, now: f64) -> Vec<Flow> {
        let timeout = self.config.idle_timeout_seconds;
        let stale: Vec<LookupKey> = self
            .open
            .iter()
            .filter(|(_, f)| now - f.time_end > timeout)
            .map(|(k, _)| *k)
            .collect();
        let mut out: Vec<Flow> = stale
            .into_iter()
            .map(|k| {
                let mut f = self.open.remove(&k).expect("listed as open");
                f.termination = Termination::IdleTimeout;
                f
            })
            .collect();
        out.sort_by(emission_order);
        out
    }

    /// Emits every remaining flow, ordered by `time_start` then key bytes.
    pub fn finalize(&mut self) -> Vec<Flow> {
        let mut out: Vec<Flow> = self
            .open
            .drain()
            .map(|(_, mut f)| {
                f.termination = Termination::EndOfCapture;
                f
            })
            .collect();
        out.sort_by(emission_order);
        out
    }
}

/// Runs a packet sequence through a fresh table, expiring idle flows as
/// capture time advances, and returns every flow in emission order.
pub fn assemble_flows<I>(packets: I, config: FlowConfig) -> Vec<Flow>
where
    I: IntoIterator<Item = DecodedPacket>,
{
    let mut table = FlowTable::new(config);
    let mut out = Vec::new();
    let mut last_sweep = f64::NEG_INFINITY;
    for pkt in packets {
        let now = pkt.timestamp;
        // A packet arriving on a key idle past the timeout starts a new flow,
        // so sweep before observing. Sweeps are throttled to once per second
        // of capture time except when the packet's own flow is stale.
        let own_stale = table
            .open
            .get(&LookupKey::of(&pkt))
            .is_some_and(|f| now - f.time_end > config.idle_timeout_seconds);
        if own_stale || now - last_sweep >= 1.0 {
            out.extend(table.expire(now));
            last_sweep = now;
        }
        out.extend(table.observe(pkt));
    }
    out.extend(table.finalize());
    out
}
