use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A domain value failed validation (option/type mismatch, range, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{what} not found: {id}")]
    NotFound { what: &'static str, id: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("image decode failed: {0}")]
    ImageDecode(String),

    /// An HTTP collaborator (embedding provider, model backend, summarizer) failed.
    #[error("remote call to {endpoint} failed{}: {message}", status.map(|s| format!(" with status {s}")).unwrap_or_default())]
    Remote {
        endpoint: String,
        status: Option<u16>,
        message: String,
        retriable: bool,
    },

    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),

    /// A backend answered, but its answer could not be interpreted.
    #[error("unparseable backend output ({reason}): {raw:?}")]
    UnparseableOutput { reason: String, raw: String },

    #[error("buffer build failed at record {record_id}: {source}")]
    BufferBuild {
        record_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0} buffer empty")]
    EmptyBuffer(&'static str),

    /// Escalation failed after retrieval scores were already computed.
    #[error("model escalation failed (speech_score={speech_score:?}, task_score={task_score:?}): {source}")]
    Escalation {
        speech_score: Option<f64>,
        task_score: Option<f64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Whether repeating the same call may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            Error::Remote { retriable, .. } => *retriable,
            Error::Timeout(_) => true,
            Error::Escalation { source, .. } | Error::BufferBuild { source, .. } => {
                source.is_retriable()
            }
            _ => false,
        }
    }

    /// True when the failure came from an unreachable or failing backend rather than
    /// from the caller's input.
    pub fn is_backend_unavailable(&self) -> bool {
        match self {
            Error::Remote { .. } | Error::Timeout(_) => true,
            Error::Escalation { source, .. } => source.is_backend_unavailable(),
            _ => false,
        }
    }
}
