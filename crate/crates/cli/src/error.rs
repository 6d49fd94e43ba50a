use opa_core::adapter::AdaptError;
use opa_core::checkpoint::CheckpointError;
use opa_core::datagen::DatagenError;
use opa_core::policy::PolicyError;
use opa_core::trainer::TrainError;
use std::path::Path;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

/// A failure with its exit status and a stable machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            exit: EXIT_USAGE,
            code,
            message: message.into(),
        }
    }

    pub fn data(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            exit: EXIT_DATA,
            code,
            message: message.into(),
        }
    }

    pub fn internal(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            exit: EXIT_INTERNAL,
            code,
            message: message.into(),
        }
    }

    /// Missing inputs are data errors; anything else on read is internal.
    pub fn read(path: &Path, e: std::io::Error, missing: &'static str) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::data(missing, format!("{} not found", path.display()))
        } else {
            CliError::internal("IO_ERROR", format!("{}: {e}", path.display()))
        }
    }

    pub fn checkpoint(path: &Path, e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::read(path, io, "CHECKPOINT_NOT_FOUND"),
            CheckpointError::VersionMismatch(m) => CliError::data("CHECKPOINT_MISMATCH", format!("{}: {m}", path.display())),
            CheckpointError::CorruptFile(m) => CliError::data("CHECKPOINT_CORRUPT", format!("{}: {m}", path.display())),
        }
    }

    pub fn dataset(path: &Path, e: DatagenError) -> Self {
        match e {
            DatagenError::Io(io) => CliError::read(path, io, "DATASET_NOT_FOUND"),
            other => CliError::data("DATASET_INVALID", format!("{}: {other}", path.display())),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidConfig(_) => CliError::data("CONFIG_INVALID", e.to_string()),
            DatagenError::PlacementFailure(_) | DatagenError::NonConvergence(_) => CliError::data("DATAGEN_FAILED", e.to_string()),
            DatagenError::Io(_) => CliError::internal("IO_ERROR", e.to_string()),
            DatagenError::VersionMismatch(_) | DatagenError::CorruptFile(_) => CliError::data("DATASET_INVALID", e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::data("CONFIG_INVALID", e.to_string()),
            TrainError::DatasetMismatch(_) => CliError::data("DATASET_MISMATCH", e.to_string()),
            TrainError::DivergedLoss { .. } => CliError::internal("TRAINING_DIVERGED", e.to_string()),
            TrainError::Policy(p) => p.into(),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::DimMismatch { .. } => CliError::data("DIM_MISMATCH", e.to_string()),
            PolicyError::MissingType(_) => CliError::data("MISSING_PREFERENCE", e.to_string()),
            _ => CliError::internal("POLICY_ERROR", e.to_string()),
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::DegeneratePerturbation => CliError::data("DEGENERATE_PERTURBATION", e.to_string()),
            AdaptError::InvalidRecord(_) | AdaptError::Scene(_) => CliError::data("PERTURBATION_INVALID", e.to_string()),
            AdaptError::InvalidConfig(_) => CliError::data("CONFIG_INVALID", e.to_string()),
            AdaptError::NoProgress { .. } => CliError::data("NO_PROGRESS", e.to_string()),
            AdaptError::Policy(p) => p.into(),
        }
    }
}
