use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum CsmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("non-triangular face at line {line}")]
    NonTriangularFace { line: usize },

    #[error("non-unit sphere coordinate at vertex {index} (norm {norm})")]
    NonUnitSphere { index: usize, norm: f64 },

    #[error("vertex count mismatch: mesh has {mesh}, sphere file has {sphere}")]
    CountMismatch { mesh: usize, sphere: usize },

    #[error("open mesh: edge ({0}, {1}) is not shared by exactly two faces")]
    OpenMesh(usize, usize),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("invalid profile parameters: {0}")]
    InvalidProfile(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {image} has an empty foreground mask")]
    EmptyMask { image: usize },

    #[error("non-finite gradient in variable block '{block}'")]
    NonFinite { block: String },

    #[error("no-candidates: target foreground is empty")]
    NoCandidates,

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CsmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that come from numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CsmError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, CsmError>;
