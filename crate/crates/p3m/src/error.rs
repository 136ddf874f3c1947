//! Crate-wide error type. Every fallible operation returns [`Result`];
//! the CLI maps these onto exit code 2 (verification failures from the
//! gradient checker use exit code 1 and are not errors in this sense).

use crate::autodiff::OpKind;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller violated a documented precondition (bad argument, wrong
    /// dimension, non-normalized embedding, and so on).
    #[error("usage: {0}")]
    Usage(String),

    /// A tape value or gradient became NaN or infinite. Carries the
    /// offending op-kind when one is known.
    #[error("numeric: non-finite value{} ({context})", op.map(|o| format!(" produced by {o:?}")).unwrap_or_default())]
    Numeric { op: Option<OpKind>, context: String },

    /// An input value lies outside the mathematical domain of an operation.
    #[error("domain: {0}")]
    Domain(String),

    /// A configuration is internally inconsistent. Names the offending
    /// class or field.
    #[error("config: {0}")]
    Config(String),

    /// Every class in the batch has an empty unlabeled set.
    #[error("degenerate batch: no class has unlabeled samples")]
    DegenerateBatch,

    /// The pre-normalization mixture collapsed to (nearly) the zero vector.
    #[error("degenerate mix: pre-normalization norm {norm:.3e} below 1e-9")]
    DegenerateMix { norm: f64 },

    /// A dataset file failed to parse. Carries the 1-based line number.
    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A file parsed but its contents violate the documented schema.
    #[error("schema: {0}")]
    Schema(String),

    /// The training loss left the finite range. Carries the last step
    /// whose loss was still finite.
    #[error("training diverged at step {step} (last finite loss {last_loss} at step {last_step})")]
    Diverged {
        step: usize,
        last_step: usize,
        last_loss: f64,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
