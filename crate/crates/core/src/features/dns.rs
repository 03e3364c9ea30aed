//! DNS query/answer features for UDP flows on port 53.

use std::net::{Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use super::Extracted;
use crate::capture::PROTO_UDP;
use crate::flow::Flow;

pub const DNS_PORT: u16 = 53;
const MAX_POINTER_HOPS: usize = 64;
const MAX_NAME_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DnsFeatures {
    pub dns_query_cnt: u64,
    pub dns_answer_cnt: u64,
    pub dns_query_name: Vec<String>,
    pub dns_query_type: Vec<u16>,
    pub dns_query_class: Vec<u16>,
    pub dns_answer_name: Vec<String>,
    pub dns_answer_ttl: Vec<u32>,
    /// Address of A/AAAA answers; "" for other record types.
    pub dns_answer_ip: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: String,
    pub qtype: u16,
    pub qclass: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Answer {
    pub name: String,
    pub rtype: u16,
    pub ttl: u32,
    pub ip: String,
}

/// Entries parsed from one message. `error` is set when parsing stopped early.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Message {
    pub id: u16,
    pub is_response: bool,
    pub questions: Vec<Question>,
    pub answers: Vec<Answer>,
    pub error: Option<DnsError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnsError {
    Truncated,
    PointerLoop,
    NameTooLong,
    BadLabel,
}

/// Reads a possibly compressed name starting at `pos`. Returns the name and
/// the offset just past it in the original position (not the jump target).
pub fn read_name(msg: &[u8], mut pos: usize) -> Result<(String, usize), DnsError> {
    let mut name = String::new();
    let mut end = None;
    let mut hops = 0;
    let mut wire_len = 0;
    loop {
        let len = *msg.get(pos).ok_or(DnsError::Truncated)? as usize;
        match len & 0xc0 {
            0x00 => {
                if len == 0 {
                    let next = pos + 1;
                    return Ok((name, end.unwrap_or(next)));
                }
                let label = msg.get(pos + 1..pos + 1 + len).ok_or(DnsError::Truncated)?;
                wire_len += len + 1;
                if wire_len > MAX_NAME_LEN {
                    return Err(DnsError::NameTooLong);
                }
                if !name.is_empty() {
                    name.push('.');
                }
                for &b in label {
                    if b.is_ascii_graphic() && b != b'.' && b != b'\\' {
                        name.push(b as char);
                    } else {
                        name.push_str(&format!("\\{b:03}"));
                    }
                }
                pos += 1 + len;
            }
            0xc0 => {
                let lo = *msg.get(pos + 1).ok_or(DnsError::Truncated)? as usize;
                hops += 1;
                if hops > MAX_POINTER_HOPS {
                    return Err(DnsError::PointerLoop);
                }
                if end.is_none() {
                    end = Some(pos + 2);
                }
                pos = ((len & 0x3f) << 8) | lo;
            }
            _ => return Err(DnsError::BadLabel),
        }
    }
}

fn u16_at(msg: &[u8], pos: usize) -> Result<u16, DnsError> {
    msg.get(pos..pos + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .ok_or(DnsError::Truncated)
}

fn u32_at(msg: &[u8], pos: usize) -> Result<u32, DnsError> {
    msg.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DnsError::Truncated)
}

/// Parses a DNS message. Returns `None` if the 12-byte header is missing;
/// otherwise everything parsed before the first error is kept.
pub fn parse_message(msg: &[u8]) -> Option<Message> {
    if msg.len() < 12 {
        return None;
    }
    let flags = u16::from_be_bytes([msg[2], msg[3]]);
    let mut m = Message {
        id: u16::from_be_bytes([msg[0], msg[1]]),
        is_response: flags & 0x8000 != 0,
        ..Message::default()
    };
    let qd = u16::from_be_bytes([msg[4], msg[5]]);
    let an = u16::from_be_bytes([msg[6], msg[7]]);
    let mut pos = 12;
    let res: Result<(), DnsError> = (|| {
        for _ in 0..qd {
            let (name, next) = read_name(msg, pos)?;
            let qtype = u16_at(msg, next)?;
            let qclass = u16_at(msg, next + 2)?;
            m.questions.push(Question { name, qtype, qclass });
            pos = next + 4;
        }
        for _ in 0..an {
            let (name, next) = read_name(msg, pos)?;
            let rtype = u16_at(msg, next)?;
            let ttl = u32_at(msg, next + 4)?;
            let rdlen = u16_at(msg, next + 8)? as usize;
            let rdata = msg.get(next + 10..next + 10 + rdlen).ok_or(DnsError::Truncated)?;
            let ip = match (rtype, rdlen) {
                (1, 4) => Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]).to_string(),
                (28, 16) => {
                    let mut o = [0u8; 16];
                    o.copy_from_slice(rdata);
                    Ipv6Addr::from(o).to_string()
                }
                _ => String::new(),
            };
            m.answers.push(Answer { name, rtype, ttl, ip });
            pos = next + 10 + rdlen;
        }
        Ok(())
    })();
    m.error = res.err();
    Some(m)
}

/// Aggregates DNS questions and answers over all port-53 UDP payloads of a
/// flow. Questions come from queries; responses contribute answers (and
/// questions too when the flow holds no query).
pub fn extract_dns(flow: &Flow) -> Extracted<DnsFeatures> {
    let k = &flow.key;
    if k.proto != PROTO_UDP || (k.endpoint_a.port != DNS_PORT && k.endpoint_b.port != DNS_PORT) {
        return Extracted::Absent;
    }
    let mut queries = Vec::new();
    let mut responses = Vec::new();
    let mut warnings = Vec::new();
    for p in flow.packets_in_order() {
        if let Some(m) = parse_message(&p.payload) {
            if let Some(e) = m.error {
                warnings.push(format!("dns message {:#06x}: {e:?}", m.id));
            }
            if m.is_response {
                responses.push(m);
            } else {
                queries.push(m);
            }
        }
    }
    let question_source = if queries.is_empty() { &responses } else { &queries };
    let mut f = DnsFeatures::default();
    for q in question_source.iter().flat_map(|m| &m.questions) {
        f.dns_query_name.push(q.name.clone());
        f.dns_query_type.push(q.qtype);
        f.dns_query_class.push(q.qclass);
    }
    for a in responses.iter().flat_map(|m| &m.answers) {
        f.dns_answer_name.push(a.name.clone());
        f.dns_answer_ttl.push(a.ttl);
        f.dns_answer_ip.push(a.ip.clone());
    }
    f.dns_query_cnt = f.dns_query_name.len() as u64;
    f.dns_answer_cnt = f.dns_answer_ttl.len() as u64;
    let found = f.dns_query_cnt > 0 || f.dns_answer_cnt > 0;
    match (found, warnings.is_empty()) {
        (true, true) => Extracted::Found(f),
        (true, false) => Extracted::FoundWithWarnings(f, warnings),
        (false, true) => Extracted::Absent,
        (false, false) => Extracted::Malformed(warnings),
    }
}

/// Message builders for fixtures.
pub mod build {
    pub fn encode_name(name: &str) -> Vec<u8> {
        let mut v = Vec::new();
        for label in name.split('.').filter(|l| !l.is_empty()) {
            v.push(label.len() as u8);
            v.extend_from_slice(label.as_bytes());
        }
        v.push(0);
        v
    }

    pub fn query(id: u16, name: &str, qtype: u16) -> Vec<u8> {
        let mut v = id.to_be_bytes().to_vec();
        v.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0]);
        v.extend(encode_name(name));
        v.extend_from_slice(&qtype.to_be_bytes());
        v.extend_from_slice(&[0, 1]);
        v
    }

    /// Response echoing the question, with A answers that point back at the
    /// question name through a compression pointer.
    pub fn a_response(id: u16, name: &str, answers: &[([u8; 4], u32)]) -> Vec<u8> {
        let mut v = id.to_be_bytes().to_vec();
        v.extend_from_slice(&[0x81, 0x80, 0, 1]);
        v.extend_from_slice(&(answers.len() as u16).to_be_bytes());
        v.extend_from_slice(&[0, 0, 0, 0]);
        v.extend(encode_name(name));
        v.extend_from_slice(&[0, 1, 0, 1]);
        for (ip, ttl) in answers {
            v.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1]);
            v.extend_from_slice(&ttl.to_be_bytes());
            v.extend_from_slice(&[0, 4]);
            v.extend_from_slice(ip);
        }
        v
    }
}
