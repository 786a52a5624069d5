use thiserror::Error;

pub type Result<T> = std::result::Result<T, StasError>;

#[derive(Debug, Error)]
pub enum StasError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid {grid_h}x{grid_w} too small: {detail}")]
    GridTooSmall {
        grid_h: usize,
        grid_w: usize,
        detail: String,
    },

    #[error("crop of scale {scale} around station {station} at ({row}, {col}) leaves the {grid_h}x{grid_w} grid")]
    CropOutOfBounds {
        station: String,
        scale: usize,
        row: usize,
        col: usize,
        grid_h: usize,
        grid_w: usize,
    },

    #[error("timestamp index {t} lacks history for {lags} lags; earliest admissible index is {earliest}")]
    InsufficientHistory { t: usize, lags: usize, earliest: usize },

    #[error("class {class} has {available} samples, {requested} requested")]
    ClassExhausted {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown meteorological element index {0}")]
    UnknownElement(usize),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite loss in {stage} at epoch {epoch}")]
    NonFinite { stage: String, epoch: usize },

    #[error("checkpoint was trained with config hash {found}, current config hashes to {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
