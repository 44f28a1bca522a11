//! Crate-wide error type.
//!
//! The CLI maps these onto exit codes: [`Error::Divergence`] is a numerical
//! failure (exit 3), everything else is a usage/config/data problem (exit 2).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named op.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A structurally invalid configuration (e.g. embed dim not divisible by
    /// head count, infeasible corpus parameters, bad split fraction).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside an op's documented domain (e.g. zero-norm vector fed to
    /// cosine similarity).
    #[error("domain error: {0}")]
    Domain(String),

    /// Attention where every key position is masked out.
    #[error("degenerate attention: all {0} key positions are masked")]
    DegenerateAttention(usize),

    /// API misuse, e.g. backward from a non-scalar node.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed knowledge-file record; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Well-formed input that violates a corpus invariant (duplicate class,
    /// empty attribute, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A token sequence that cannot fit the context window.
    #[error("sequence of {required} tokens exceeds context of {available}")]
    ContextOverflow { required: usize, available: usize },

    /// Checkpoint container problems: bad magic, version, or checksum.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
