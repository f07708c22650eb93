use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid band spec: {0}")]
    BandSpec(String),

    #[error("invalid adaptation rule `{id}`: {reason}")]
    Rule { id: String, reason: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("corrupt manifest: {0}")]
    Manifest(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("corrupt container: {0}")]
    Container(String),

    /// The message starts with "unsupported input spec".
    #[error("{0}")]
    UnsupportedInput(String),

    #[error("normalizer statistics for `{0}` are uninitialized; run a training-mode pass first")]
    UninitializedStats(String),

    #[error("sparsity k={k} outside [1, {n}]")]
    Sparsity { k: usize, n: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("task mismatch: {0}")]
    Task(String),

    #[error("missing score for model `{model}` on dataset `{dataset}`")]
    MissingCell { model: String, dataset: String },

    #[error("duplicate score for model `{model}` on dataset `{dataset}`")]
    DuplicateCell { model: String, dataset: String },

    #[error("unknown direction token `{token}` at line {line}")]
    UnknownDirection { token: String, line: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
