use thiserror::Error;

/// Errors raised by the texture pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed data shapes: mismatched planes, empty rasters, ragged rows.
    #[error("structural error: {0}")]
    Structural(String),
    /// A parameter outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Wavelet packet expansion past the configured maximum depth.
    #[error("decomposition depth {requested} exceeds maximum {max}")]
    Depth { requested: usize, max: usize },
    /// Bad caller input: dimension mismatches, unknown labels.
    #[error("input error: {0}")]
    Input(String),
    /// Inconsistent dataset contents (e.g. a patient spanning two classes).
    #[error("data error: {0}")]
    Data(String),
    /// A classifier could not be fitted.
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Parameter(_) => "parameter",
            Error::Depth { .. } => "depth",
            Error::Input(_) => "input",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
