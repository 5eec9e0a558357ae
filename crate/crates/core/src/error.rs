use std::path::PathBuf;

use thiserror::Error;

use crate::posegraph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is too close to pi for a stable logarithm")]
    NearSingular { angle: f64 },

    #[error("point cloud contains a non-finite coordinate at index {index}")]
    NonFinitePoint { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty query cloud")]
    EmptyQueryCloud,

    #[error("insufficient features: source has {source_len}, target has {target_len}")]
    InsufficientFeatures { source_len: usize, target_len: usize },

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),

    #[error("unconstrained node {0}")]
    UnconstrainedNode(NodeId),

    #[error("information matrix is not symmetric positive definite")]
    InvalidInformation,

    #[error("graph has no prior factor")]
    NoPrior,

    #[error("linear system is singular")]
    SingularSystem,

    #[error("submap {submap} has no pose for optimization index {index}")]
    MissingPoseIndex { submap: usize, index: usize },

    #[error("submap {0} is not integrated into the global map")]
    NotIntegrated(usize),

    #[error("submap {0} is already integrated into the global map")]
    AlreadyIntegrated(usize),

    #[error("out-of-order input: expected index {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("association failed: {matched} of {total} poses matched within the time gate")]
    Association { matched: usize, total: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: line {line}: {message}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset schema violation: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pipeline stage failed: {0}")]
    Stage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
