use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document {doc_id}: {message}")]
    InvalidDocument { doc_id: String, message: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("unknown entity type {0:?}")]
    UnknownEntityType(String),

    #[error("unknown relation type {0:?}")]
    UnknownRelationType(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template {template}: {message}")]
    Template { template: String, message: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("fixture-miss: no replay fixture for digest {digest}")]
    FixtureMiss { digest: String },

    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),

    #[error("request failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),

    #[error("mentions from different documents mixed: {0} vs {1}")]
    CrossDocument(String, String),

    #[error("arity mismatch for relation {rtype}: {left} vs {right}")]
    ArityMismatch {
        rtype: String,
        left: usize,
        right: usize,
    },

    #[error("failure budget exceeded: {failed} of {total} targets failed")]
    FailureBudget { failed: usize, total: usize },

    #[error("json: {0}")]
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
