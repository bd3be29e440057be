use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("index {index} out of range for domain of size {size}")]
    Index { index: usize, size: usize },

    #[error("fraction {fraction} selects no elements from a domain of {domain}")]
    DegenerateFraction { fraction: f64, domain: usize },

    #[error("invalid kernel or ridge configuration: {0}")]
    InvalidKernel(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible dictionary: {0}")]
    Infeasible(String),

    #[error("layer state error: {0}")]
    State(&'static str),

    #[error("training diverged at layer {layer:?}, epoch {epoch}: {detail}")]
    Divergence {
        layer: Option<usize>,
        epoch: usize,
        detail: String,
    },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("label {label} out of range (< {classes}) at record {record}")]
    LabelRange {
        label: u32,
        classes: usize,
        record: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
