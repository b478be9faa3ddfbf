use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PompError {
    #[error("parameter `{name}`: value {value} outside the domain of its {transform} transform")]
    Domain {
        name: String,
        value: f64,
        transform: &'static str,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` is declared both shared and unit-specific")]
    DuplicateParameter(String),

    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in compartment `{compartment}` at t = {time}")]
    NonFinite { compartment: String, time: f64 },

    #[error("filtering failure in unit `{unit}` at observation {step}: all particle weights below floor")]
    FilterFailure { unit: String, step: usize },

    #[error("iterated filtering collapsed at iteration {iteration}, unit `{unit}`, observation {step}")]
    SearchCollapse {
        iteration: usize,
        unit: String,
        step: usize,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, PompError>;
