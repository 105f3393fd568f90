use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at tape node {node}: {detail}")]
    Numeric { node: usize, detail: String },

    #[error("no stage module registered for stage type {stage_type}{}", stage_index.map(|i| format!(" (stage index {i})")).unwrap_or_default())]
    MissingModule {
        stage_type: usize,
        stage_index: Option<usize>,
    },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row error at line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Errors that indicate a broken internal invariant rather than bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. } | Error::Contract(_) | Error::Numeric { .. } | Error::Diverged { .. }
        )
    }
}
