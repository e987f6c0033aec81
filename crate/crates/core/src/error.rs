use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid annotation record: {0}")]
    InvalidAnnotation(String),

    #[error("duplicate annotation tuple (object={object}, room={room}, receptacle={receptacle})")]
    DuplicateAnnotation {
        object: String,
        room: String,
        receptacle: String,
    },

    #[error("no ground-truth room for object(s): {}", .0.join(", "))]
    NoGroundTruth(Vec<String>),

    #[error("category `{0}` has no ground-truth room")]
    MissingGroundTruth(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("checksum mismatch: header says {expected:#018x}, payload hashes to {actual:#018x}")]
    Checksum { expected: u64, actual: u64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("metric: {0}")]
    Metric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
