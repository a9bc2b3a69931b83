use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty score list")]
    EmptyScores,
    #[error("empty vector list")]
    EmptyVectors,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("head count mismatch: expected {expected}, got {actual}")]
    HeadCountMismatch { expected: usize, actual: usize },
    #[error("empty centroid list")]
    EmptyCentroids,
    #[error("empty key set")]
    EmptyKeys,
    #[error("invalid cluster count k={k} for {n} points")]
    InvalidClusterCount { k: usize, n: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unit {0} is already host-resident")]
    DuplicateUnit(u64),
    #[error("unknown unit id {0}")]
    UnknownUnit(u64),
    #[error("config/trace mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while reading or decoding a trace file pair.
#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("payload size mismatch: manifest declares {declared} bytes, payload has {actual}")]
    PayloadSizeMismatch { declared: u64, actual: u64 },
    #[error("header/payload size mismatch: tensor {tensor} {detail}")]
    HeaderPayloadMismatch { tensor: String, detail: String },
    #[error("checksum mismatch: manifest {declared:#010x}, payload {actual:#010x}")]
    ChecksumMismatch { declared: u32, actual: u32 },
    #[error("non-finite value in tensor {tensor} at (layer {layer}, index {index}, head {head}, dim {dim})")]
    NonFinite {
        tensor: String,
        layer: usize,
        index: usize,
        head: usize,
        dim: usize,
    },
    #[error("invalid trace: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    InvalidValue { key: String, value: String, msg: String },
}
