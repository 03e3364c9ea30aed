//! Capture-file ingestion: classic capture parsing, header decoding and a
//! packet crafter for fixtures.

mod craft;
mod decode;
mod pcap;

pub use craft::{craft_packet, PacketSpec, ETHERNET_HEADER_LEN};
pub use decode::{
    decode_packet, DecodedPacket, FiveTuple, SkipReason, TcpFlags, MAX_IPV6_EXTENSIONS, PROTO_TCP,
    PROTO_UDP,
};
pub use pcap::{
    parse_capture, write_capture, Capture, CaptureHeader, CaptureReader, CaptureWriter, RawPacket,
    Resolution, GLOBAL_HEADER_LEN, LINKTYPE_ETHERNET, LINKTYPE_IPV4, LINKTYPE_IPV6, LINKTYPE_RAW,
    LINKTYPE_RAW_BSD, MAGIC_MICROS, MAGIC_NANOS, RECORD_HEADER_LEN,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("not a capture file (magic {0:#010x})")]
    UnknownMagic(u32),
    #[error("capture global header truncated ({len} of 24 bytes)")]
    TruncatedHeader { len: usize },
    #[error("record at offset {offset} claims {claimed} bytes but only {available} remain")]
    TruncatedRecord { offset: u64, claimed: u64, available: u64 },
    #[error("invalid packet spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
