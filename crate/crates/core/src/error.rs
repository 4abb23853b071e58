use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// More than the tolerated share of input lines failed to parse.
    #[error("{malformed} of {total} lines malformed in {path} (limit {limit_pct}%); first bad line {first_bad_line}: {reason}")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        limit_pct: f64,
        first_bad_line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A least-squares design lost full column rank.
    #[error("singular design: column(s) {} are collinear", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("no feasible clustering candidate; nearest misses: {}", nearest.join("; "))]
    NoFeasibleCandidate { nearest: Vec<String> },

    #[error("bootstrap aborted: {dropped} of {requested} replicates failed to refit")]
    BootstrapAborted { dropped: usize, requested: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
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

    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::TooManyMalformed { .. } => "malformed_input",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::SingularDesign { .. } => "singular_design",
            Error::NoFeasibleCandidate { .. } => "no_feasible_candidate",
            Error::BootstrapAborted { .. } => "bootstrap_aborted",
            Error::Stage { source, .. } => source.kind(),
        }
    }
}
