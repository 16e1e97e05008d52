use std::path::PathBuf;

/// Error taxonomy for the whole pipeline.
///
/// The CLI maps variants onto process exit codes: configuration problems
/// exit 2, dataset and file-format problems exit 3, training divergence
/// exits 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, schedule, or argument combination.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or file-format problem (missing files, bad palette entries,
    /// corrupt checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or class-layout mismatch between cooperating pieces.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite loss during training.
    #[error("training diverged at step {step}, epoch {epoch}: loss is not finite")]
    Diverged { step: usize, epoch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Diverged { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
