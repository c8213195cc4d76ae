use dynasel::predlog::LogError;
use dynasel::selection::SelectionError;
use dynasel::trainer::external::ExternalError;
use dynasel::trainer::TrainerError;
use thiserror::Error;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(what: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Other(format!("{what}: {e}"))
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::InvalidConfig(_) | TrainerError::InvalidNoise(_) | TrainerError::ShapeMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            TrainerError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainerError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::InvalidRatio(_) | SelectionError::InvalidConfig(_) => CliError::Config(e.to_string()),
            SelectionError::Mixture(_) => CliError::Numerical(e.to_string()),
            SelectionError::Trainer(t) => t.into(),
            SelectionError::Log(l) => l.into(),
            SelectionError::External(ExternalError::Log { .. } | ExternalError::MissingOutput { .. }) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}
