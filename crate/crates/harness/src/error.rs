use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    CorpusParse { path: String, line: usize, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(tracecore::Error),
    #[error("missing embeddings: {0}")]
    MissingEmbeddings(String),
    #[error("no trace carries a correctness label")]
    MissingLabels,
    #[error("missing metadata: {0}")]
    MissingMetadata(String),
    #[error("missing report: {0}")]
    MissingReport(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] tracecore::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
