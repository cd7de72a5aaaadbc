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
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("invalid sample {value} at index {index}")]
    InvalidSample { index: usize, value: f64 },
    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("point ({x}, {y}) is not covered by the mesh")]
    NotCovered { x: f64, y: f64 },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale activation cache (cache revision {cache}, parameters at {params})")]
    StaleCache { cache: u64, params: u64 },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("bad magic: not an .nht container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
