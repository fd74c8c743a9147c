use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("census generation failed: {0}")]
    Generation(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("rank-deficient design: column {index} (`{name}`) is linearly dependent on the other columns")]
    RankDeficient { index: usize, name: String },

    #[error("HC3 undefined: observation {row} has leverage 1")]
    UnitLeverage { row: usize },

    #[error("allocation spec error: {0}")]
    Spec(String),

    #[error("allocation pool error: {0}")]
    Pool(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("cell failed: {0}")]
    Cell(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
