//! Flow analytics: capture parsing, flow assembly, feature records, dataset
//! preparation, a small neural-network engine, the hierarchical multi-task
//! classifier, baselines and evaluation.

pub mod baselines;
pub mod capture;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod flow;
pub mod matrix;
pub mod mthl;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod train;

pub use capture::{CaptureError, DecodedPacket, FiveTuple, RawPacket};
pub use features::{FlowRecord, Labels, MetadataFeatures};
pub use flow::{Flow, FlowConfig, FlowKey};
