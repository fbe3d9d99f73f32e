use thiserror::Error;

/// Errors produced by model evaluation, optimization and the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate gate denominator {denominator:e} at ({x}, {y}){}", pixel.map(|p| format!(" (pixel {p})")).unwrap_or_default())]
    DegenerateGate {
        x: f64,
        y: f64,
        denominator: f64,
        pixel: Option<usize>,
    },

    #[error("model has no kernels left")]
    EmptyModel,

    #[error("segment {0} not found")]
    SegmentNotFound(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("all {0} blocks failed during local optimization")]
    AllBlocksFailed(usize),

    #[error("model file parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerical kind (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGate { .. } | Error::EmptyModel | Error::AllBlocksFailed(_)
        )
    }
}
