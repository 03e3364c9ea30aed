//! TLS handshake features from cleartext ClientHello, ServerHello and
//! Certificate messages.
//!
//! Handshake fragments are reassembled across records within one direction.
//! The client side is read from the initiator's payload stream and the server
//! side from the responder's. GREASE values are kept verbatim.

use serde::{Deserialize, Serialize};

use super::Extracted;
use crate::capture::{DecodedPacket, PROTO_TCP};
use crate::flow::Flow;

const CONTENT_CHANGE_CIPHER_SPEC: u8 = 20;
const CONTENT_HANDSHAKE: u8 = 22;
const HS_CLIENT_HELLO: u8 = 1;
const HS_SERVER_HELLO: u8 = 2;
const HS_CERTIFICATE: u8 = 11;
const EXT_SUPPORTED_VERSIONS: u16 = 43;
const EXT_KEY_SHARE: u16 = 51;

/// SSL 3.0 through TLS 1.3.
pub const KNOWN_VERSIONS: [u16; 5] = [0x0300, 0x0301, 0x0302, 0x0303, 0x0304];

/// Fourteen TLS features. Scalar fields of a missing side are -1 and its
/// lists are empty; `tls_svr_cs` is "" when no ServerHello was seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsFeatures {
    pub tls_cs: Vec<String>,
    pub tls_cs_cnt: i64,
    pub tls_ext_types: Vec<u16>,
    pub tls_ext_cnt: i64,
    pub tls_key_exchange_len: i64,
    pub tls_version: i64,
    pub tls_sid_len: i64,
    pub tls_svr_cs: String,
    pub tls_svr_ext_types: Vec<u16>,
    pub tls_svr_ext_cnt: i64,
    pub tls_svr_key_exchange_len: i64,
    pub tls_svr_version: i64,
    pub tls_svr_sid_len: i64,
    pub tls_svr_cert_cnt: i64,
}

impl TlsFeatures {
    fn empty() -> Self {
        TlsFeatures {
            tls_cs: Vec::new(),
            tls_cs_cnt: -1,
            tls_ext_types: Vec::new(),
            tls_ext_cnt: -1,
            tls_key_exchange_len: -1,
            tls_version: -1,
            tls_sid_len: -1,
            tls_svr_cs: String::new(),
            tls_svr_ext_types: Vec::new(),
            tls_svr_ext_cnt: -1,
            tls_svr_key_exchange_len: -1,
            tls_svr_version: -1,
            tls_svr_sid_len: -1,
            tls_svr_cert_cnt: -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub legacy_version: u16,
    pub session_id_len: usize,
    pub ciphersuites: Vec<u16>,
    pub extensions: Vec<u16>,
    pub key_share_len: usize,
    pub supported_versions: Vec<u16>,
}

impl ClientHello {
    pub fn version(&self) -> u16 {
        self.supported_versions
            .iter()
            .copied()
            .filter(|v| !is_grease(*v))
            .max()
            .unwrap_or(self.legacy_version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub legacy_version: u16,
    pub session_id_len: usize,
    pub ciphersuite: u16,
    pub extensions: Vec<u16>,
    pub key_share_len: usize,
    pub selected_version: Option<u16>,
}

impl ServerHello {
    pub fn version(&self) -> u16 {
        self.selected_version.unwrap_or(self.legacy_version)
    }
}

pub fn is_grease(v: u16) -> bool {
    v & 0x0f0f == 0x0a0a && (v >> 8) == (v & 0xff)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TlsError {
    Truncated(&'static str),
    UnknownVersion(u16),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TlsError> {
        if self.buf.len() - self.pos < n {
            return Err(TlsError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, TlsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, TlsError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u24(&mut self, what: &'static str) -> Result<usize, TlsError> {
        let b = self.take(3, what)?;
        Ok(((b[0] as usize) << 16) | ((b[1] as usize) << 8) | b[2] as usize)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Extension (type, data) pairs; an absent extension block is legal.
fn parse_extensions(c: &mut Cursor<'_>) -> Result<Vec<(u16, Vec<u8>)>, TlsError> {
    let mut out = Vec::new();
    if c.remaining() == 0 {
        return Ok(out);
    }
    let len = c.u16("extensions length")? as usize;
    let mut ext = Cursor::new(c.take(len, "extensions")?);
    while ext.remaining() > 0 {
        let ty = ext.u16("extension type")?;
        let l = ext.u16("extension length")? as usize;
        out.push((ty, ext.take(l, "extension data")?.to_vec()));
    }
    Ok(out)
}

fn check_version(v: u16) -> Result<u16, TlsError> {
    if KNOWN_VERSIONS.contains(&v) {
        Ok(v)
    } else {
        Err(TlsError::UnknownVersion(v))
    }
}

pub fn parse_client_hello(body: &[u8]) -> Result<ClientHello, TlsError> {
    let mut c = Cursor::new(body);
    let legacy_version = check_version(c.u16("client version")?)?;
    c.take(32, "client random")?;
    let sid = c.u8("session id length")? as usize;
    c.take(sid, "session id")?;
    let cs_len = c.u16("ciphersuites length")? as usize;
    if cs_len % 2 != 0 {
        return Err(TlsError::Truncated("odd ciphersuites length"));
    }
    let cs = c.take(cs_len, "ciphersuites")?;
    let ciphersuites = cs.chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect();
    let comp = c.u8("compression length")? as usize;
    c.take(comp, "compression methods")?;
    let exts = parse_extensions(&mut c)?;
    let mut key_share_len = 0;
    let mut supported_versions = Vec::new();
    for (ty, data) in &exts {
        match *ty {
            EXT_KEY_SHARE => key_share_len = data.len(),
            EXT_SUPPORTED_VERSIONS => {
                if let Some((&n, rest)) = data.split_first() {
                    let n = (n as usize).min(rest.len());
                    supported_versions =
                        rest[..n].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect();
                }
            }
            _ => {}
        }
    }
    Ok(ClientHello {
        legacy_version,
        session_id_len: sid,
        ciphersuites,
        extensions: exts.iter().map(|(t, _)| *t).collect(),
        key_share_len,
        supported_versions,
    })
}

pub fn parse_server_hello(body: &[u8]) -> Result<ServerHello, TlsError> {
    let mut c = Cursor::new(body);
    let legacy_version = check_version(c.u16("server version")?)?;
    c.take(32, "server random")?;
    let sid = c.u8("session id length")? as usize;
    c.take(sid, "session id")?;
    let ciphersuite = c.u16("selected ciphersuite")?;
    c.u8("compression method")?;
    let exts = parse_extensions(&mut c)?;
    let mut key_share_len = 0;
    let mut selected_version = None;
    for (ty, data) in &exts {
        match *ty {
            EXT_KEY_SHARE => key_share_len = data.len(),
            EXT_SUPPORTED_VERSIONS if data.len() >= 2 => {
                selected_version = Some(check_version(u16::from_be_bytes([data[0], data[1]]))?);
            }
            _ => {}
        }
    }
    Ok(ServerHello {
        legacy_version,
        session_id_len: sid,
        ciphersuite,
        extensions: exts.iter().map(|(t, _)| *t).collect(),
        key_share_len,
        selected_version,
    })
}

/// Number of complete certificate entries in a Certificate message body.
pub fn count_certificates(body: &[u8]) -> usize {
    let mut c = Cursor::new(body);
    let Ok(total) = c.u24("certificate list length") else {
        return 0;
    };
    let list = &body[3..3 + total.min(body.len() - 3)];
    let mut c = Cursor::new(list);
    let mut n = 0;
    while let Ok(len) = c.u24("certificate length") {
        if c.take(len, "certificate").is_err() {
            break;
        }
        n += 1;
    }
    n
}

/// Reassembled handshake bytes from the leading TLS records of a payload
/// stream. Returns `None` when the stream does not start with a TLS record.
fn handshake_stream(stream: &[u8]) -> Option<Vec<u8>> {
    let mut hs = Vec::new();
    let mut pos = 0;
    let mut saw_handshake = false;
    while stream.len() - pos >= 5 {
        let ty = stream[pos];
        let major = stream[pos + 1];
        let len = u16::from_be_bytes([stream[pos + 3], stream[pos + 4]]) as usize;
        if major != 3 || !(20..=23).contains(&ty) {
            break;
        }
        let end = (pos + 5 + len).min(stream.len());
        match ty {
            CONTENT_HANDSHAKE => {
                saw_handshake = true;
                hs.extend_from_slice(&stream[pos + 5..end]);
            }
            CONTENT_CHANGE_CIPHER_SPEC => {}
            _ => break,
        }
        pos = end;
    }
    saw_handshake.then_some(hs)
}

/// Splits reassembled handshake bytes into (type, body) messages; a
/// trailing partial message is returned with its truncated body.
fn handshake_messages(hs: &[u8]) -> Vec<(u8, &[u8], bool)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while hs.len() - pos >= 4 {
        let ty = hs[pos];
        let len = ((hs[pos + 1] as usize) << 16) | ((hs[pos + 2] as usize) << 8) | hs[pos + 3] as usize;
        let start = pos + 4;
        let end = start + len;
        if end > hs.len() {
            out.push((ty, &hs[start..], false));
            break;
        }
        out.push((ty, &hs[start..end], true));
        pos = end;
    }
    out
}

fn payload_stream(pkts: &[DecodedPacket]) -> Vec<u8> {
    pkts.iter().flat_map(|p| p.payload.iter().copied()).collect()
}

/// Extracts TLS handshake features from a TCP flow.
pub fn extract_tls(flow: &Flow) -> Extracted<TlsFeatures> {
    if flow.key.proto != PROTO_TCP {
        return Extracted::Absent;
    }
    let client_hs = handshake_stream(&payload_stream(&flow.fwd_pkts));
    let server_hs = handshake_stream(&payload_stream(&flow.rev_pkts));
    if client_hs.is_none() && server_hs.is_none() {
        return Extracted::Absent;
    }

    let mut feats = TlsFeatures::empty();
    let mut found = false;
    let mut warnings = Vec::new();

    if let Some(hs) = &client_hs {
        for (ty, body, complete) in handshake_messages(hs) {
            if ty != HS_CLIENT_HELLO {
                continue;
            }
            match parse_client_hello(body) {
                Ok(ch) => {
                    feats.tls_cs = ch.ciphersuites.iter().map(|c| format!("{c:04x}")).collect();
                    feats.tls_cs_cnt = ch.ciphersuites.len() as i64;
                    feats.tls_ext_cnt = ch.extensions.len() as i64;
                    feats.tls_ext_types = ch.extensions.clone();
                    feats.tls_key_exchange_len = ch.key_share_len as i64;
                    feats.tls_version = ch.version() as i64;
                    feats.tls_sid_len = ch.session_id_len as i64;
                    found = true;
                }
                Err(e) => warnings.push(format!("client hello (complete={complete}): {e:?}")),
            }
            break;
        }
    }

    if let Some(hs) = &server_hs {
        let msgs = handshake_messages(hs);
        let mut server_seen = false;
        for (ty, body, complete) in &msgs {
            match *ty {
                HS_SERVER_HELLO if !server_seen => match parse_server_hello(body) {
                    Ok(sh) => {
                        feats.tls_svr_cs = format!("{:04x}", sh.ciphersuite);
                        feats.tls_svr_ext_cnt = sh.extensions.len() as i64;
                        feats.tls_svr_ext_types = sh.extensions.clone();
                        feats.tls_svr_key_exchange_len = sh.key_share_len as i64;
                        feats.tls_svr_version = sh.version() as i64;
                        feats.tls_svr_sid_len = sh.session_id_len as i64;
                        feats.tls_svr_cert_cnt = 0;
                        server_seen = true;
                        found = true;
                    }
                    Err(e) => {
                        warnings.push(format!("server hello (complete={complete}): {e:?}"));
                        break;
                    }
                },
                HS_CERTIFICATE if server_seen => {
                    feats.tls_svr_cert_cnt += count_certificates(body) as i64;
                }
                _ => {}
            }
        }
    }

    match (found, warnings.is_empty()) {
        (true, true) => Extracted::Found(feats),
        (true, false) => Extracted::FoundWithWarnings(feats, warnings),
        (false, true) => Extracted::Absent,
        (false, false) => Extracted::Malformed(warnings),
    }
}

/// Test fixtures for handshake messages.
pub mod build {
    /// Wraps a handshake body in a handshake header and a TLS record.
    pub fn record(hs_type: u8, body: &[u8]) -> Vec<u8> {
        let mut hs = vec![hs_type];
        hs.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        hs.extend_from_slice(body);
        let mut rec = vec![22, 3, 1];
        rec.extend_from_slice(&(hs.len() as u16).to_be_bytes());
        rec.extend_from_slice(&hs);
        rec
    }

    pub fn extension(ty: u16, data: &[u8]) -> Vec<u8> {
        let mut v = ty.to_be_bytes().to_vec();
        v.extend_from_slice(&(data.len() as u16).to_be_bytes());
        v.extend_from_slice(data);
        v
    }

    pub fn client_hello(sid: &[u8], suites: &[u16], exts: &[Vec<u8>]) -> Vec<u8> {
        let mut b = vec![3, 3];
        b.extend_from_slice(&[0x11; 32]);
        b.push(sid.len() as u8);
        b.extend_from_slice(sid);
        b.extend_from_slice(&((suites.len() * 2) as u16).to_be_bytes());
        for s in suites {
            b.extend_from_slice(&s.to_be_bytes());
        }
        b.extend_from_slice(&[1, 0]);
        let ext: Vec<u8> = exts.concat();
        b.extend_from_slice(&(ext.len() as u16).to_be_bytes());
        b.extend_from_slice(&ext);
        b
    }

    pub fn server_hello(sid: &[u8], suite: u16, exts: &[Vec<u8>]) -> Vec<u8> {
        let mut b = vec![3, 3];
        b.extend_from_slice(&[0x22; 32]);
        b.push(sid.len() as u8);
        b.extend_from_slice(sid);
        b.extend_from_slice(&suite.to_be_bytes());
        b.push(0);
        let ext: Vec<u8> = exts.concat();
        b.extend_from_slice(&(ext.len() as u16).to_be_bytes());
        b.extend_from_slice(&ext);
        b
    }

    pub fn certificate(certs: &[&[u8]]) -> Vec<u8> {
        let mut list = Vec::new();
        for c in certs {
            list.extend_from_slice(&(c.len() as u32).to_be_bytes()[1..]);
            list.extend_from_slice(c);
        }
        let mut b = (list.len() as u32).to_be_bytes()[1..].to_vec();
        b.extend_from_slice(&list);
        b
    }
}
