use thiserror::Error;

/// Errors produced by the toolkit.
///
/// `Input` and `Config` are caller mistakes; `Integration` and `Model` are
/// failures detected while running a computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integration failure at t={t}: {reason}")]
    Integration { t: f64, reason: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(expected: usize, got: usize) -> Error {
    Error::Input(format!("dimension mismatch: expected {expected}, got {got}"))
}
