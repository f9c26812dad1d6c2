use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("line {line}: sample {id:?} rejected: {reasons}")]
    Rejected {
        id: String,
        line: usize,
        reasons: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("token budget exceeded: {needed} tokens needed, {budget} allowed")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("backend error: {0}")]
    Backend(#[from] crate::llm::BackendError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("upstream artifact error: {0}")]
    Artifact(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Backend(_) | Error::BudgetExceeded { .. } => 4,
            _ => 3,
        }
    }
}
