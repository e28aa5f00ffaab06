use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("value out of range in {op}: {detail}")]
    Range { op: &'static str, detail: String },

    #[error("sender mask is empty; cannot locate the sender")]
    EmptyMask,

    #[error("scene placement failed after {attempts} attempts")]
    PlacementFailed { attempts: usize },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: u32, vocab: usize },

    #[error("token sequence is empty")]
    EmptyTokens,

    #[error("sample {sample_id}: file missing at {path}")]
    MissingSample { sample_id: String, path: PathBuf },

    #[error("sample {sample_id}: checksum mismatch (manifest {expected}, file {actual})")]
    Checksum {
        sample_id: String,
        expected: String,
        actual: String,
    },

    #[error("sample {sample_id}: vocabulary mismatch ({detail})")]
    Vocabulary { sample_id: String, detail: String },

    #[error("unknown sample id {0}")]
    UnknownSample(String),

    #[error("degenerate target direction: box centroid coincides with the sender")]
    DegenerateTarget,

    #[error("no anchor can be assigned: ground-truth box {0:?} lies outside the grid")]
    NoAnchor([f64; 4]),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("provider {name}: {detail}")]
    Provider { name: String, detail: String },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
