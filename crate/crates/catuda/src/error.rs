//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value ({value}) produced by op `{op}` during {pass}")]
    NonFinite {
        op: &'static str,
        pass: &'static str,
        value: f64,
    },

    #[error("invalid graph structure: {0}")]
    Structure(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training aborted at epoch {epoch}, iteration {iter}: {reason}")]
    TrainingAborted {
        epoch: usize,
        iter: usize,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {detail}")]
    FileFormat { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, CatError>;
