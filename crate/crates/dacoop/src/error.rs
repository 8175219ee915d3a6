use std::path::PathBuf;

/// Errors produced by the pursuit lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("arena generation failed: {0}")]
    Generation(String),

    #[error("spawn failed: {0}")]
    Spawn(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("graph usage: {0}")]
    GraphUsage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
