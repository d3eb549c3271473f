use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid quantization spec: {0}")]
    Spec(String),
    #[error("unknown quantization site `{0}`")]
    UnknownSite(String),
    #[error("sequence overflow: {needed} positions exceed max_seq {max_seq}")]
    SequenceOverflow { needed: usize, max_seq: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("container: bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("container: unsupported version {0}")]
    Version(u32),
    #[error("container: truncated ({what}: needs {needed} bytes, {available} available)")]
    Truncated {
        what: String,
        needed: u64,
        available: u64,
    },
    #[error("container: inconsistent entry `{name}`: {reason}")]
    Inconsistent { name: String, reason: String },
    #[error("prefix cache fingerprint {cache} does not match model {model}")]
    Fingerprint { cache: String, model: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: loss {loss:.6e} > 10x initial {initial:.6e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
