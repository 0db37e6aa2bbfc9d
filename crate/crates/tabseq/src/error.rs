//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor dimension disagreement; the message names the shapes involved.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Violated API contract (non-scalar loss, mismatched gold shapes, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Class index outside the tag inventory.
    #[error("label error: {0}")]
    Label(String),

    /// Bad configuration value or unknown option.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; carries the offending line where known.
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must describe the same sentence disagree in length.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A relation or feature refers to something that does not exist.
    #[error("reference error: {0}")]
    Reference(String),

    /// Entity spans collide.
    #[error("encode error: {0}")]
    Encode(String),

    /// Binary payload does not match its own header.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// A feature file does not cover every requested sentence.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Checkpoint written by an incompatible version or config.
    #[error("version error: {0}")]
    Version(String),

    /// Invalid runtime input (empty sentence, missing id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged; carries step, learning rate and batch ids.
    #[error("non-finite loss at step {step} (lr {lr:.3e}, batch {batch_ids:?})")]
    NonFinite { step: usize, lr: f64, batch_ids: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
