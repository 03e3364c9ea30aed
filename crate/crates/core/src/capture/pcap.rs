//! Classic capture file format (24-byte global header, 16-byte record headers).
//!
//! Both byte orders and both timestamp resolutions are accepted. The magic
//! number selects byte order and whether `ts_fraction` counts micro- or
//! nanoseconds.

use std::io::{self, Read, Write};

use super::CaptureError;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;

pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
/// Raw IP as written by some BSD-derived tools.
pub const LINKTYPE_RAW_BSD: u32 = 12;
pub const LINKTYPE_IPV4: u32 = 228;
pub const LINKTYPE_IPV6: u32 = 229;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resolution {
    Micros,
    Nanos,
}

impl Resolution {
    pub fn units_per_second(self) -> u32 {
        match self {
            Resolution::Micros => 1_000_000,
            Resolution::Nanos => 1_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureHeader {
    pub big_endian: bool,
    pub resolution: Resolution,
    pub version_major: u16,
    pub version_minor: u16,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub link_type: u32,
}

impl CaptureHeader {
    pub fn new(link_type: u32, resolution: Resolution) -> Self {
        CaptureHeader {
            big_endian: false,
            resolution,
            version_major: 2,
            version_minor: 4,
            thiszone: 0,
            sigfigs: 0,
            snaplen: 262_144,
            link_type,
        }
    }

    pub fn parse(buf: &[u8; GLOBAL_HEADER_LEN]) -> Result<Self, CaptureError> {
        let raw_le = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
        let (big_endian, resolution) = match raw_le {
            MAGIC_MICROS => (false, Resolution::Micros),
            MAGIC_NANOS => (false, Resolution::Nanos),
            m if m.swap_bytes() == MAGIC_MICROS => (true, Resolution::Micros),
            m if m.swap_bytes() == MAGIC_NANOS => (true, Resolution::Nanos),
            m => return Err(CaptureError::UnknownMagic(m)),
        };
        let u16_at = |o: usize| {
            let b = [buf[o], buf[o + 1]];
            if big_endian {
                u16::from_be_bytes(b)
            } else {
                u16::from_le_bytes(b)
            }
        };
        let u32_at = |o: usize| read_u32(&buf[o..o + 4], big_endian);
        Ok(CaptureHeader {
            big_endian,
            resolution,
            version_major: u16_at(4),
            version_minor: u16_at(6),
            thiszone: u32_at(8) as i32,
            sigfigs: u32_at(12),
            snaplen: u32_at(16),
            link_type: u32_at(20),
        })
    }

    pub fn to_bytes(&self) -> [u8; GLOBAL_HEADER_LEN] {
        let magic = match self.resolution {
            Resolution::Micros => MAGIC_MICROS,
            Resolution::Nanos => MAGIC_NANOS,
        };
        let mut out = [0u8; GLOBAL_HEADER_LEN];
        let be = self.big_endian;
        put_u32(&mut out[0..4], magic, be);
        put_u16(&mut out[4..6], self.version_major, be);
        put_u16(&mut out[6..8], self.version_minor, be);
        put_u32(&mut out[8..12], self.thiszone as u32, be);
        put_u32(&mut out[12..16], self.sigfigs, be);
        put_u32(&mut out[16..20], self.snaplen, be);
        put_u32(&mut out[20..24], self.link_type, be);
        out
    }
}

/// One capture record as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub ts_seconds: u32,
    pub ts_fraction: u32,
    pub resolution: Resolution,
    pub captured_len: u32,
    pub original_len: u32,
    pub frame: Vec<u8>,
}

impl RawPacket {
    /// Real-valued timestamp in seconds.
    pub fn timestamp(&self) -> f64 {
        self.ts_seconds as f64
            + self.ts_fraction as f64 / self.resolution.units_per_second() as f64
    }
}

fn read_u32(b: &[u8], big_endian: bool) -> u32 {
    let b = [b[0], b[1], b[2], b[3]];
    if big_endian {
        u32::from_be_bytes(b)
    } else {
        u32::from_le_bytes(b)
    }
}

fn put_u32(dst: &mut [u8], v: u32, big_endian: bool) {
    let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
    dst.copy_from_slice(&b);
}

fn put_u16(dst: &mut [u8], v: u16, big_endian: bool) {
    let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
    dst.copy_from_slice(&b);
}

/// Streaming reader over a classic capture file.
pub struct CaptureReader<R> {
    inner: R,
    header: CaptureHeader,
    offset: u64,
    done: bool,
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CaptureError> {
        let mut buf = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut buf)?;
        if got < 4 {
            return Err(CaptureError::UnknownMagic(read_partial_magic(&buf[..got])));
        }
        if got < GLOBAL_HEADER_LEN {
            // Validate the magic before reporting truncation.
            let magic = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
            if ![MAGIC_MICROS, MAGIC_NANOS].contains(&magic)
                && ![MAGIC_MICROS, MAGIC_NANOS].contains(&magic.swap_bytes())
            {
                return Err(CaptureError::UnknownMagic(magic));
            }
            return Err(CaptureError::TruncatedHeader { len: got });
        }
        let header = CaptureHeader::parse(&buf)?;
        Ok(CaptureReader {
            inner,
            header,
            offset: GLOBAL_HEADER_LEN as u64,
            done: false,
        })
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    /// Byte offset of the next record header.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn next_record(&mut self) -> Result<Option<RawPacket>, CaptureError> {
        let mut rec = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut rec)?;
        if got == 0 {
            return Ok(None);
        }
        let record_offset = self.offset;
        if got < RECORD_HEADER_LEN {
            return Err(CaptureError::TruncatedRecord {
                offset: record_offset,
                claimed: RECORD_HEADER_LEN as u64,
                available: got as u64,
            });
        }
        let be = self.header.big_endian;
        let ts_seconds = read_u32(&rec[0..4], be);
        let ts_fraction = read_u32(&rec[4..8], be);
        let captured_len = read_u32(&rec[8..12], be);
        let original_len = read_u32(&rec[12..16], be);

        // Read incrementally so a bogus length cannot force a huge allocation.
        let mut frame = Vec::with_capacity((captured_len as usize).min(1 << 16));
        let read = (&mut self.inner)
            .take(captured_len as u64)
            .read_to_end(&mut frame)?;
        if read < captured_len as usize {
            return Err(CaptureError::TruncatedRecord {
                offset: record_offset,
                claimed: captured_len as u64,
                available: read as u64,
            });
        }
        self.offset += (RECORD_HEADER_LEN + frame.len()) as u64;
        Ok(Some(RawPacket {
            ts_seconds,
            ts_fraction,
            resolution: self.header.resolution,
            captured_len,
            original_len,
            frame,
        }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<RawPacket, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_partial_magic(b: &[u8]) -> u32 {
    let mut m = [0u8; 4];
    m[..b.len()].copy_from_slice(b);
    u32::from_le_bytes(m)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// A fully parsed capture file.
#[derive(Debug, Clone)]
pub struct Capture {
    pub header: CaptureHeader,
    pub packets: Vec<RawPacket>,
}

/// Parses a whole capture held in memory. Packets are returned in file order.
pub fn parse_capture(bytes: &[u8]) -> Result<Capture, CaptureError> {
    let reader = CaptureReader::new(bytes)?;
    let header = *reader.header();
    let packets = reader.collect::<Result<Vec<_>, _>>()?;
    Ok(Capture { header, packets })
}

pub struct CaptureWriter<W: Write> {
    inner: W,
    header: CaptureHeader,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut inner: W, header: CaptureHeader) -> io::Result<Self> {
        inner.write_all(&header.to_bytes())?;
        Ok(CaptureWriter { inner, header })
    }

    pub fn write_packet(&mut self, pkt: &RawPacket) -> io::Result<()> {
        let be = self.header.big_endian;
        let mut rec = [0u8; RECORD_HEADER_LEN];
        put_u32(&mut rec[0..4], pkt.ts_seconds, be);
        put_u32(&mut rec[4..8], pkt.ts_fraction, be);
        put_u32(&mut rec[8..12], pkt.frame.len() as u32, be);
        put_u32(&mut rec[12..16], pkt.original_len, be);
        self.inner.write_all(&rec)?;
        self.inner.write_all(&pkt.frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Serializes packets into an in-memory capture file.
pub fn write_capture(header: &CaptureHeader, packets: &[RawPacket]) -> Vec<u8> {
    let mut w = CaptureWriter::new(Vec::new(), *header).expect("writing to a Vec cannot fail");
    for p in packets {
        w.write_packet(p).expect("writing to a Vec cannot fail");
    }
    w.into_inner()
}
