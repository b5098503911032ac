use std::path::PathBuf;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected RVOL1\\0, found {0:?}")]
    BadMagic([u8; 6]),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload size mismatch: dims and dtype imply {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("degenerate reference: histogram matching needs a non-constant reference")]
    DegenerateReference,

    #[error("ROI {0} is absent from every label volume")]
    EmptyMask(u16),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient templates: need {needed}, have {available}")]
    InsufficientTemplates { needed: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("width inconsistency: {0}")]
    WidthInconsistency(String),

    #[error("patch too small: {0}")]
    PatchTooSmall(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("duplicate ROI id {0}")]
    DuplicateRoi(u16),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("geometry hash mismatch: expected {expected}, found {found}")]
    GeometryMismatch { expected: String, found: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
