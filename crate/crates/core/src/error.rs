use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("weight {0} outside INT7 range [-64, 63]")]
    Int7Range(i32),
    #[error("activation {0} outside [0, 255]")]
    ActivationRange(i64),
    #[error("invalid sparsity {0}: must satisfy 0 <= s < 1")]
    InvalidSparsity(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("odd target {0} invalid: expected an odd integer in [3, 63]")]
    InvalidOdd(u32),
    #[error("empty tap list")]
    EmptyTaps,
    #[error("accumulator overflow: value needs more than {width} bits")]
    AccumulatorOverflow { width: u32 },
    #[error("invalid fold: {0}")]
    InvalidFold(String),
    #[error("invalid instance configuration: {0}")]
    InvalidInstances(String),
    #[error("unknown layer or block `{0}`")]
    UnknownLayer(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("blob length mismatch: expected {expected} bytes, found {found}")]
    BlobLength { expected: usize, found: usize },
    #[error("malformed netlist: {0}")]
    Netlist(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible partition: block {block} does not fit on one chip at fold {max_fold}; minimum feasible fold {min_feasible_fold:?}")]
    Infeasible {
        block: String,
        max_fold: u32,
        min_feasible_fold: Option<u32>,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
