use std::path::PathBuf;

use crate::grid_model::BusId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid network: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("wind penetration {0} would convert every synchronous machine")]
    InfeasiblePenetration(f64),

    #[error("island containing bus {0} has no synchronous machine")]
    NoSynchronousMachine(BusId),

    #[error("no equilibrium: power mismatch {0:e} pu after solve")]
    NoEquilibrium(f64),

    #[error("numerical blow-up at t = {0} s")]
    BlowUp(f64),

    #[error("invalid simulation setup: {0}")]
    SimSetup(String),

    #[error("scenario generation failed after {attempts} attempts: {last}")]
    ScenarioRetries { attempts: usize, last: String },

    #[error("sample rate {0} /s is not an integer multiple of 30 /s")]
    RateNotMultiple(f64),

    #[error("need {needed} samples after the reference, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("feature dimension mismatch: tree expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("placement problem: {0}")]
    Placement(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("grid cell (wind {wind}, error {instr_range} deg): {source}")]
    Cell {
        wind: f64,
        instr_range: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
