use std::path::PathBuf;

/// Errors produced anywhere in the search engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} elements, got {actual}")]
    TensorSize {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable belongs to graph {found}, not the live graph {expected}")]
    DetachedGraph { expected: u64, found: u64 },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite values produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter kind `{0}`")]
    UnknownKind(String),

    #[error("space `{0}` cannot be enumerated")]
    UnsupportedSpace(String),

    #[error("genotype parse error at byte {offset}: {msg}")]
    GenotypeParse { offset: usize, msg: String },

    #[error("genotype `{genotype}` does not belong to space `{space}`")]
    SpaceMismatch { genotype: String, space: String },

    #[error("genotype `{0}` is not in the oracle table")]
    MissingGenotype(String),

    #[error("{}: expected {expected} bytes, found {actual}", path.display())]
    FileSize { path: PathBuf, expected: u64, actual: u64 },

    #[error("{}: record {record} has label {label} (must be < 10)", path.display())]
    BadLabel { path: PathBuf, record: usize, label: u8 },

    #[error("dataset too small: {msg}")]
    DatasetTooSmall { msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("search failed at epoch {epoch}: {source}")]
    SearchFailed {
        epoch: usize,
        partial: Box<crate::search::SearchResult>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Configuration problems map to exit code 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
