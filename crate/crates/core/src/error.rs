use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("all weights are zero; cannot normalize")]
    AllZero,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid race set: {0}")]
    InvalidRaceSet(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("duplicate surname {0:?}")]
    DuplicateSurname(String),

    #[error("duplicate geography {0:?}")]
    DuplicateGeo(String),

    #[error("geography {0:?} has no positive count")]
    ZeroGeoRow(String),

    #[error("record {id:?} has {found} covariates, expected {expected}")]
    InconsistentCovariateArity {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid context value {0:?}; expected 0 or 1")]
    InvalidContext(String),

    #[error("unknown race label {0:?}")]
    UnknownRace(String),

    #[error("dataset has no race labels")]
    UnlabeledDataset,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown geography {0:?}")]
    UnknownGeo(String),

    #[error("no fitted posterior for geography {geo:?} at context {context}")]
    UnfittedContext { geo: String, context: u8 },

    #[error("non-finite feature value at column {column}")]
    NonFiniteFeature { column: usize },

    #[error("no records in group {0:?}")]
    EmptyGroup(String),

    #[error("proxy mass for race {0:?} is zero")]
    ZeroMass(String),

    #[error("Bayes estimator denominator is zero for race {0:?}")]
    ZeroDenominator(String),

    #[error("no records with context {0}")]
    EmptyContext(u8),

    #[error("degenerate bound: {0}")]
    DegenerateBound(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("conditioning event has zero probability mass: {0}")]
    ZeroMassEvent(String),

    #[error("invalid model file: {0}")]
    InvalidModel(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by the filesystem rather than by the content of inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
