//! Per-flow feature extraction and the JSON-lines record format.

pub mod dns;
pub mod http;
mod metadata;
mod record;
pub mod tls;

pub use dns::{extract_dns, DnsFeatures};
pub use http::{extract_http, HttpFeatures};
pub use metadata::{
    extract_metadata, header_bin, interval_bin, metadata_column_names, payload_bin, MetadataFeatures,
    FLAG_COUNTS, HDR_BINS, HDR_BIN_40_THRESHOLD, HDR_BIN_WIDTH, INTERVAL_BINS, INTERVAL_EDGES_MS,
    METADATA_COLUMNS, METADATA_FIELDS, PLD_BINS, PLD_BIN_128_THRESHOLD, PLD_BIN_INF_THRESHOLD,
    PLD_BIN_WIDTH,
};
pub use record::{
    extract_record, flow_id, parse_record, serialize_record, ExtractCounts, FlowRecord, Labels,
    SchemaManifest, SCHEMA_VERSION,
};
pub use tls::{extract_tls, TlsFeatures};

/// Outcome of a protocol-specific extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extracted<T> {
    Absent,
    Found(T),
    /// Features were recovered but part of the protocol data was malformed.
    FoundWithWarnings(T, Vec<String>),
    /// Protocol data was present but nothing usable could be parsed.
    Malformed(Vec<String>),
}

impl<T> Extracted<T> {
    pub fn into_option(self) -> Option<T> {
        match self {
            Extracted::Found(t) | Extracted::FoundWithWarnings(t, _) => Some(t),
            Extracted::Absent | Extracted::Malformed(_) => None,
        }
    }

    pub fn warnings(&self) -> &[String] {
        match self {
            Extracted::FoundWithWarnings(_, w) | Extracted::Malformed(w) => w,
            _ => &[],
        }
    }
}
