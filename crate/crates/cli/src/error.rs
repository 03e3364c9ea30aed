use netml_core::baselines::BaselineError;
use netml_core::dataset::DatasetError;
use netml_core::matrix::MatrixError;
use netml_core::mthl::MthlError;
use netml_core::nn::{CheckpointError, NnError};
use netml_core::train::TrainError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    /// Some inputs failed; outputs for the rest were written.
    #[error("{} of {total} input(s) failed: {}", .failed.len(), .failed.iter().map(|(f, e)| format!("{f}: {e}")).collect::<Vec<_>>().join("; "))]
    Partial { total: usize, failed: Vec<(String, String)> },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Data(_) | CliError::Partial { .. } | CliError::VocabularyMismatch(_) => EXIT_DATA,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Nn(n) => n.into(),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MthlError> for CliError {
    fn from(e: MthlError) -> Self {
        match e {
            MthlError::Train(t) => t.into(),
            MthlError::Nn(n) => n.into(),
            MthlError::Config(_) | MthlError::ShapeTraceViolation { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Train(t) => t.into(),
            BaselineError::Nn(n) => n.into(),
            BaselineError::ZeroK | BaselineError::KTooLarge { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(DatasetError, MatrixError, CheckpointError);
