use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("trace text is empty or whitespace only")]
    EmptyText,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("subset is over {subset} steps but the trace has {trace}")]
    LengthMismatch { subset: usize, trace: usize },

    #[error("remote oracle failed after {attempts} attempts: {message}")]
    RemoteError { attempts: u32, message: String },
    #[error("malformed oracle payload: {0}")]
    ProtocolError(String),
    #[error("lookup table has no entry for the retained steps")]
    LookupMiss,
    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle returned no answer distribution")]
    DistributionUnavailable,
    #[error("aligned candidate set is empty")]
    EmptySupport,
    #[error("oracle returned no answer loss")]
    LossUnavailable,

    #[error("full trace is not sufficient for its own answer")]
    FullTraceInsufficient,
    #[error("trace has {len} steps, exhaustive search is capped at {max}")]
    TraceTooLong { len: usize, max: usize },
    #[error("result has no sufficiency-preserving deletion path")]
    PathUnavailable,

    #[error("necessity profile is degenerate")]
    DegenerateProfile,
    #[error("empty input")]
    EmptyInput,

    #[error("embedder failed on step {index}: {message}")]
    EmbedderError { index: usize, message: String },
    #[error("class {label} has {count} examples, at least {required} needed")]
    ClassImbalance { label: bool, count: usize, required: usize },
    #[error("clustering needs at least 2 classes of at least 2 members")]
    DegenerateClustering,
    #[error("two class centroids coincide")]
    CoincidentCentroids,
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid planted spec: {0}")]
    InvalidSpec(String),
}
