use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmoeError>;

#[derive(Debug, Error)]
pub enum HmoeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("fit failed after {restarts} restarts: {diagnostics}")]
    FitFailed { restarts: usize, diagnostics: String },

    #[error("quadrature did not converge: achieved error {achieved:.3e} > tolerance {tolerance:.3e}")]
    QuadratureError { achieved: f64, tolerance: f64 },

    #[error("Voronoi cell of size {0} has no established exponent (strict mode)")]
    UnsupportedCellSize(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> HmoeError {
    HmoeError::InvalidInput(msg.into())
}
