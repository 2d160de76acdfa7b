use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmaError>;

#[derive(Debug, Error)]
pub enum NmaError {
    #[error("no studies supplied")]
    EmptyInput,

    #[error("duplicate study id `{0}`")]
    DuplicateStudy(String),

    #[error("study `{0}` has fewer than two arms")]
    TooFewArms(String),

    #[error("study `{study}` lacks reference treatment `{reference}` and augmentation is disabled")]
    MissingReference { study: String, reference: String },

    #[error("invalid arm in study `{study}`: {reason}")]
    InvalidArm { study: String, reason: String },

    #[error("unknown treatment `{0}`")]
    UnknownTreatment(String),

    #[error("unknown design `{0}`")]
    UnknownDesign(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("reference disconnected")]
    ReferenceDisconnected,

    #[error("designs not connected to the reference: {0}")]
    Disconnected(String),

    #[error("under-identified network")]
    UnderIdentified,

    #[error("design `{0}` is not evaluable")]
    NotEvaluable(String),

    #[error("arm `{treatment}` of design `{design}` is unreachable after exclusion")]
    UnreachableArm { design: String, treatment: String },

    #[error("loop edge {0}-{1} has no direct evidence")]
    MissingEdge(String, String),

    #[error("REML fit did not converge: {0}")]
    NotConverged(String),

    #[error("test not applicable: {0}")]
    NotApplicable(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for NmaError {
    fn from(e: csv::Error) -> Self {
        NmaError::Parse(e.to_string())
    }
}
