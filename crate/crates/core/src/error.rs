use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Dimension {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("payload parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("partition infeasible after {retries} retries")]
    PartitionInfeasible { retries: usize },

    #[error("self-distillation already ran for client {client_id}")]
    RefineryAlreadyRun { client_id: usize },

    #[error("client {client_id} has no distilled data; run the distillation refinery first")]
    RefineryNotRun { client_id: usize },

    #[error("client {client_id} has an empty shard")]
    EmptyShard { client_id: usize },

    #[error("training diverged on client {client_id} at round {round}, step {step} (loss {loss})")]
    Divergence {
        client_id: usize,
        round: usize,
        step: usize,
        loss: f64,
    },

    #[error("no client updates to aggregate")]
    EmptyUpdates,

    #[error("client {client_id}: {source}")]
    Client {
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gradient for task {task} is identically zero")]
    ZeroGradient { task: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("missing artifact {}: run `fedsdr {command}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::MissingArtifact { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
