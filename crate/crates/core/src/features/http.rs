//! Plaintext HTTP/1.x request/response features.

use serde::{Deserialize, Serialize};

use super::Extracted;
use crate::capture::{DecodedPacket, PROTO_TCP};
use crate::flow::Flow;

/// Header sections beyond this size are cut before parsing.
pub const MAX_HEADER_BYTES: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HttpMethod {
    Other = 0,
    Get = 1,
    Post = 2,
    Head = 3,
    Put = 4,
    Delete = 5,
}

impl HttpMethod {
    pub fn from_token(tok: &str) -> HttpMethod {
        match tok {
            "GET" => HttpMethod::Get,
            "POST" => HttpMethod::Post,
            "HEAD" => HttpMethod::Head,
            "PUT" => HttpMethod::Put,
            "DELETE" => HttpMethod::Delete,
            _ => HttpMethod::Other,
        }
    }
}

/// Six HTTP features. `http_method` is -1 without a request, `http_code` is
/// 0 without a response and `http_content_len` is -1 without a
/// Content-Length header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpFeatures {
    pub http_method: i64,
    pub http_code: i64,
    pub http_content_len: i64,
    pub http_uri: String,
    pub http_host: String,
    pub http_content_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: HttpMethod,
    pub uri: String,
    pub headers: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub code: u16,
    pub headers: Vec<(String, String)>,
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// Leading header section of a direction, cut at the blank line or at
/// `MAX_HEADER_BYTES`.
fn head_bytes(pkts: &[DecodedPacket]) -> Vec<u8> {
    let mut buf = Vec::new();
    for p in pkts.iter().filter(|p| !p.payload.is_empty()) {
        buf.extend_from_slice(&p.payload);
        if buf.len() >= MAX_HEADER_BYTES {
            buf.truncate(MAX_HEADER_BYTES);
            break;
        }
        if let Some(end) = find(&buf, b"\r\n\r\n") {
            buf.truncate(end + 2);
            break;
        }
    }
    buf
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Splits into complete CRLF- (or LF-) terminated lines; a trailing partial
/// line is dropped.
fn lines(buf: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = buf;
    while let Some(i) = rest.iter().position(|&b| b == b'\n') {
        let mut line = &rest[..i];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        out.push(String::from_utf8_lossy(line).into_owned());
        rest = &rest[i + 1..];
    }
    out
}

fn parse_headers(lines: &[String]) -> Vec<(String, String)> {
    lines
        .iter()
        .take_while(|l| !l.is_empty())
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase() || b == b'-' || b == b'_')
}

pub fn parse_request(buf: &[u8]) -> Option<Request> {
    let ls = lines(buf);
    let first = ls.first()?;
    let mut parts = first.split(' ');
    let (method, uri, version) = (parts.next()?, parts.next()?, parts.next()?);
    if !is_token(method) || !version.starts_with("HTTP/1.") || parts.next().is_some() {
        return None;
    }
    Some(Request {
        method: HttpMethod::from_token(method),
        uri: uri.to_string(),
        headers: parse_headers(&ls[1..]),
    })
}

pub fn parse_response(buf: &[u8]) -> Option<Response> {
    let ls = lines(buf);
    let first = ls.first()?;
    let mut parts = first.splitn(3, ' ');
    let (version, code) = (parts.next()?, parts.next()?);
    if !version.starts_with("HTTP/1.") || code.len() != 3 {
        return None;
    }
    let code: u16 = code.parse().ok()?;
    if !(100..=599).contains(&code) {
        return None;
    }
    Some(Response { code, headers: parse_headers(&ls[1..]) })
}

/// Parses the first request (initiator side) and first response (responder
/// side) of a TCP flow.
pub fn extract_http(flow: &Flow) -> Extracted<HttpFeatures> {
    if flow.key.proto != PROTO_TCP {
        return Extracted::Absent;
    }
    let req = parse_request(&head_bytes(&flow.fwd_pkts));
    let resp = parse_response(&head_bytes(&flow.rev_pkts));
    if req.is_none() && resp.is_none() {
        return Extracted::Absent;
    }
    let empty = Vec::new();
    let req_headers = req.as_ref().map_or(&empty, |r| &r.headers);
    let resp_headers = resp.as_ref().map_or(&empty, |r| &r.headers);
    // response headers describe the entity; fall back to request headers
    let content_len = header(resp_headers, "content-length")
        .or_else(|| header(req_headers, "content-length"))
        .and_then(|v| v.parse::<i64>().ok())
        .filter(|&n| n >= 0)
        .unwrap_or(-1);
    let content_type = header(resp_headers, "content-type")
        .or_else(|| header(req_headers, "content-type"))
        .unwrap_or("");
    Extracted::Found(HttpFeatures {
        http_method: req.as_ref().map_or(-1, |r| r.method as i64),
        http_code: resp.as_ref().map_or(0, |r| r.code as i64),
        http_content_len: content_len,
        http_uri: req.as_ref().map_or(String::new(), |r| r.uri.clone()),
        http_host: header(req_headers, "host").unwrap_or("").to_string(),
        http_content_type: content_type.to_string(),
    })
}
