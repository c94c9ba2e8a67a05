use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("location ({x}, {y}) lies outside the study region")]
    OutOfRegion { x: f64, y: f64 },

    #[error("degenerate coordinates: {0}")]
    DegenerateCoordinates(String),

    #[error("covariance factorization failed (final jitter {jitter:e})")]
    CholeskyFailed { jitter: f64 },

    #[error("non-finite intensity: {0}")]
    NonFiniteIntensity(String),

    #[error("model/scenario mismatch: {0}")]
    ModelMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("holdout error: {0}")]
    Holdout(String),

    #[error("score error: {0}")]
    Score(String),

    #[error("non-finite posterior at initialization: offending term {0}")]
    NonFinitePosterior(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv row {line}: {msg}")]
    CsvRow { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
