//! Capture bytes to flow records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capture::{decode_packet, CaptureError, CaptureReader};
use crate::features::{extract_record, ExtractCounts, FlowRecord};
use crate::flow::{assemble_flows, FlowConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub packets: u64,
    pub decoded: u64,
    /// Skipped frames by reason.
    pub skipped: BTreeMap<String, u64>,
    #[serde(flatten)]
    pub counts: ExtractCounts,
}

impl ExtractSummary {
    pub fn merge(&mut self, other: &ExtractSummary) {
        self.packets += other.packets;
        self.decoded += other.decoded;
        for (k, v) in &other.skipped {
            *self.skipped.entry(k.clone()).or_default() += v;
        }
        self.counts.merge(&other.counts);
    }
}

/// Parses one capture, assembles flows and extracts a record per flow.
/// Records come back in flow emission order.
pub fn extract_capture(
    bytes: &[u8],
    trace: &str,
    config: FlowConfig,
) -> Result<(Vec<FlowRecord>, ExtractSummary), CaptureError> {
    let reader = CaptureReader::new(bytes)?;
    let link = reader.header().link_type;
    let mut summary = ExtractSummary::default();
    let mut decoded = Vec::new();
    for raw in reader {
        let raw = raw?;
        summary.packets += 1;
        match decode_packet(&raw, link) {
            Ok(p) => decoded.push(p),
            Err(reason) => *summary.skipped.entry(reason.as_str().to_string()).or_default() += 1,
        }
    }
    summary.decoded = decoded.len() as u64;
    let flows = assemble_flows(decoded, config);
    let records = flows
        .iter()
        .filter(|f| f.stored_packets() > 0)
        .map(|f| extract_record(f, trace, &mut summary.counts))
        .collect();
    Ok((records, summary))
}
