use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed FGM header: {0}")]
    FgmHeader(String),

    #[error("inconsistent shape for layer `{layer}`: {detail}")]
    FgmShape { layer: String, detail: String },

    #[error("checksum failure for blob `{blob}`: {detail}")]
    FgmChecksum { blob: String, detail: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("class index {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::FgmHeader(_) => "fgm-header",
            Error::FgmShape { .. } => "fgm-shape",
            Error::FgmChecksum { .. } => "fgm-checksum",
            Error::InvalidModel(_) => "invalid-model",
            Error::UnsupportedStructure(_) => "unsupported-structure",
            Error::UnknownLayer(_) => "unknown-layer",
            Error::ClassOutOfRange { .. } => "class-out-of-range",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}
