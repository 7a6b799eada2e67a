use std::path::PathBuf;

use robustlab::attacks::AttackError;
use robustlab::datasets::DatasetError;
use robustlab::models::ModelError;
use robustlab::theory::TheoryError;
use robustlab::trades::TradesError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) | CliError::ReplayMismatch(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ArchitectureMismatch { .. } | ModelError::Invalid(_) | ModelError::InputShape { .. } => {
                CliError::Config(e.to_string())
            }
            ModelError::Checkpoint(_) | ModelError::Io(_) => CliError::Data(e.to_string()),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Model(m) => m.into(),
            AttackError::Spatial(_) | AttackError::Invalid(_) => CliError::Config(e.to_string()),
            AttackError::EmptyDataset => CliError::Data(e.to_string()),
        }
    }
}

impl From<TradesError> for CliError {
    fn from(e: TradesError) -> Self {
        match e {
            TradesError::Attack(a) => a.into(),
            TradesError::Model(m) => m.into(),
            TradesError::Invalid(_) | TradesError::UnresolvedAll => CliError::Config(e.to_string()),
            TradesError::Diverged { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        CliError::Config(e.to_string())
    }
}
