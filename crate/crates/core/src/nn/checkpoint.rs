//! Model checkpoints.
//!
//! ```text
//! 0      8 bytes   magic "NMLCKPT1"
//! 8      u64 LE    header length H
//! 16     H bytes   JSON header (CheckpointHeader)
//! ..     f32 LE    parameter values, concatenated in header order
//! ```

use std::io::{self, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Param;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NMLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint is a {found} model, expected {expected}")]
    Kind { found: String, expected: String },
    #[error("parameter {0} missing or of different shape")]
    Param(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    /// Model configuration, enough to rebuild the layer stack.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// Vocabularies, scaler and anything else the model kind needs.
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        seed: u64,
        config: serde_json::Value,
        meta: serde_json::Value,
        params: &[&Param<f32>],
    ) -> Checkpoint {
        let mut entries = Vec::with_capacity(params.len());
        let mut data = Vec::new();
        for p in params {
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
                offset: data.len() as u64,
                len: p.value.len() as u64,
            });
            data.extend_from_slice(&p.value);
        }
        let header = CheckpointHeader { format_version: CHECKPOINT_VERSION, kind: kind.to_string(), seed, config, params: entries, meta };
        Checkpoint { header, data }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.header.kind != kind {
            return Err(CheckpointError::Kind { found: self.header.kind.clone(), expected: kind.to_string() });
        }
        Ok(())
    }

    /// Copies stored values into `params`, matched by name and shape.
    pub fn load_into(&self, params: &mut [&mut Param<f32>]) -> Result<(), CheckpointError> {
        if params.len() != self.header.params.len() {
            return Err(CheckpointError::Param(format!("{} stored, {} in model", self.header.params.len(), params.len())));
        }
        for p in params.iter_mut() {
            let e = self
                .header
                .params
                .iter()
                .find(|e| e.name == p.name)
                .filter(|e| e.shape == p.shape)
                .ok_or_else(|| CheckpointError::Param(p.name.clone()))?;
            let (o, n) = (e.offset as usize, e.len as usize);
            let src = self.data.get(o..o + n).ok_or(CheckpointError::Truncated)?;
            p.value.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + h.len() + self.data.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let hlen = u64::from_le_bytes(len);
        let mut h = Vec::new();
        (&mut r).take(hlen).read_to_end(&mut h)?;
        if h.len() as u64 != hlen {
            return Err(CheckpointError::Truncated);
        }
        let header: CheckpointHeader = serde_json::from_slice(&h)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let total: u64 = header.params.iter().map(|p| p.len).sum();
        let mut data = Vec::with_capacity(total as usize);
        let mut buf = [0u8; 4];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        Ok(Checkpoint { header, data })
    }
}
