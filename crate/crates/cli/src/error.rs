use panelpomp::PompError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<PompError> for CliError {
    fn from(e: PompError) -> Self {
        let msg = e.to_string();
        match e {
            PompError::Data(_) => CliError::Data(msg),
            PompError::NonFinite { .. }
            | PompError::FilterFailure { .. }
            | PompError::SearchCollapse { .. }
            | PompError::Numerical(_) => CliError::Numerical(msg),
            PompError::Domain { .. }
            | PompError::UnknownParameter(_)
            | PompError::DuplicateParameter(_)
            | PompError::Length { .. }
            | PompError::UnknownUnit(_)
            | PompError::InvalidArgument(_)
            | PompError::UnknownModel(_) => CliError::Config(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
