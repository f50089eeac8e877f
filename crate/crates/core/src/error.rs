use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed json: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: invalid PGM: {reason}", path.display())]
    PgmParse { path: PathBuf, reason: String },

    #[error("dataset format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch for {what}: expected {expected}, found {found}")]
    ChecksumMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("count mismatch for {what}: meta declares {declared}, found {found}")]
    CountMismatch {
        what: String,
        declared: usize,
        found: usize,
    },

    #[error("sample {id}: image file {} is missing", path.display())]
    MissingImage { id: u64, path: PathBuf },

    #[error("dataset invariant violated: {0}")]
    InvalidDataset(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({step})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        step: &'static str,
    },

    #[error("teacher net {net} changed during a frozen pass")]
    TeacherMutated { net: String },

    #[error("invalid training config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
