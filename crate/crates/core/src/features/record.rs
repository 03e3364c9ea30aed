use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    extract_dns, extract_http, extract_metadata, extract_tls, metadata_column_names, DnsFeatures,
    Extracted, HttpFeatures, MetadataFeatures, TlsFeatures, HDR_BINS, HDR_BIN_40_THRESHOLD,
    HDR_BIN_WIDTH, INTERVAL_EDGES_MS, METADATA_COLUMNS, METADATA_FIELDS, PLD_BINS,
    PLD_BIN_128_THRESHOLD, PLD_BIN_INF_THRESHOLD, PLD_BIN_WIDTH,
};
use crate::flow::{Flow, FlowConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub top: String,
    pub mid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine: Option<String>,
}

/// One flow as stored in a JSON-lines file. Field order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub schema_version: u32,
    pub id: u64,
    /// Source capture name; used to look up labels.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub trace: String,
    pub sa: String,
    pub da: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_end: Option<f64>,
    #[serde(flatten)]
    pub metadata: MetadataFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls: Option<TlsFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dns: Option<DnsFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Labels>,
}

/// Stable identifier derived from the trace name, flow key and start time.
pub fn flow_id(trace: &str, flow: &Flow) -> u64 {
    let mut h = Sha256::new();
    h.update(trace.as_bytes());
    h.update([0u8]);
    h.update(flow.key.to_bytes());
    h.update(flow.time_start.to_bits().to_le_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Per-run extraction tallies, shaped like a protocol-coverage table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractCounts {
    pub flows: u64,
    pub metadata: u64,
    pub tls: u64,
    pub dns: u64,
    pub http: u64,
    pub tls_warnings: u64,
    pub dns_warnings: u64,
}

impl ExtractCounts {
    pub fn merge(&mut self, other: &ExtractCounts) {
        self.flows += other.flows;
        self.metadata += other.metadata;
        self.tls += other.tls;
        self.dns += other.dns;
        self.http += other.http;
        self.tls_warnings += other.tls_warnings;
        self.dns_warnings += other.dns_warnings;
    }
}

fn keep<T>(e: Extracted<T>, found: &mut u64, warned: Option<&mut u64>, what: &str) -> Option<T> {
    if !e.warnings().is_empty() {
        for w in e.warnings() {
            log::debug!("{what}: {w}");
        }
        if let Some(c) = warned {
            *c += 1;
        }
    }
    let v = e.into_option();
    if v.is_some() {
        *found += 1;
    }
    v
}

/// Builds the record for one flow. Addresses are written verbatim; mask them
/// before publishing.
pub fn extract_record(flow: &Flow, trace: &str, counts: &mut ExtractCounts) -> FlowRecord {
    counts.flows += 1;
    counts.metadata += 1;
    let tls = keep(extract_tls(flow), &mut counts.tls, Some(&mut counts.tls_warnings), "tls");
    let dns = keep(extract_dns(flow), &mut counts.dns, Some(&mut counts.dns_warnings), "dns");
    let http = keep(extract_http(flow), &mut counts.http, None, "http");
    FlowRecord {
        schema_version: SCHEMA_VERSION,
        id: flow_id(trace, flow),
        trace: trace.to_string(),
        sa: flow.key.endpoint_a.addr.to_string(),
        da: flow.key.endpoint_b.addr.to_string(),
        time_start: Some(flow.time_start),
        time_end: Some(flow.time_end),
        metadata: extract_metadata(flow),
        tls,
        dns,
        http,
        labels: None,
    }
}

/// One JSON line (without the trailing newline).
pub fn serialize_record(rec: &FlowRecord) -> String {
    serde_json::to_string(rec).expect("records contain only finite numbers and strings")
}

pub fn parse_record(line: &str) -> Result<FlowRecord, serde_json::Error> {
    serde_json::from_str(line)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub width: usize,
}

/// Describes the record layout; shipped next to every record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaManifest {
    pub schema_version: u32,
    pub metadata_features: Vec<ColumnSpec>,
    pub metadata_columns: Vec<String>,
    pub pld_bin_width_bytes: u32,
    pub pld_bins: usize,
    pub hdr_bin_width_bytes: u32,
    pub hdr_bins: usize,
    pub interval_bin_edges_ms: Vec<u64>,
    pub interval_resolution_us: u32,
    pub pld_bin_128_rule: String,
    pub pld_bin_inf_rule: String,
    pub hdr_bin_40_rule: String,
    pub flag_count_order: Vec<String>,
    pub direction_in: String,
    pub per_direction_packet_cap: usize,
    pub conformant: bool,
    pub counts_include_post_cap_packets: bool,
    pub idle_timeout_seconds: f64,
    pub absent_scalar: i64,
    pub absent_string: String,
}

impl SchemaManifest {
    pub fn current(flow: &FlowConfig) -> Self {
        let names = metadata_column_names();
        debug_assert_eq!(names.len(), METADATA_COLUMNS);
        let mut edges = vec![0];
        edges.extend(INTERVAL_EDGES_MS);
        SchemaManifest {
            schema_version: SCHEMA_VERSION,
            metadata_features: METADATA_FIELDS
                .iter()
                .map(|(n, w)| ColumnSpec { name: n.to_string(), width: *w })
                .collect(),
            metadata_columns: names,
            pld_bin_width_bytes: PLD_BIN_WIDTH,
            pld_bins: PLD_BINS,
            hdr_bin_width_bytes: HDR_BIN_WIDTH,
            hdr_bins: HDR_BINS,
            interval_bin_edges_ms: edges,
            interval_resolution_us: 1,
            pld_bin_128_rule: format!("payload_len > {PLD_BIN_128_THRESHOLD}"),
            pld_bin_inf_rule: format!("payload_len > {PLD_BIN_INF_THRESHOLD}"),
            hdr_bin_40_rule: format!("header_len <= {HDR_BIN_40_THRESHOLD}"),
            flag_count_order: ["ACK", "PSH", "RST", "SYN", "FIN"].map(String::from).to_vec(),
            direction_in: "initiator to responder".into(),
            per_direction_packet_cap: flow.per_direction_packet_cap,
            conformant: flow.is_conformant(),
            counts_include_post_cap_packets: false,
            idle_timeout_seconds: flow.idle_timeout_seconds,
            absent_scalar: -1,
            absent_string: String::new(),
        }
    }
}
