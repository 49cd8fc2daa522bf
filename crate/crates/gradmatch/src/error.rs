//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: bad shape {shape:?}: {msg}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference oracle: non-finite value at entry {entry}")]
    Oracle { entry: usize },

    #[error("IDX format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("dataset consistency error: {0}")]
    Consistency(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("synthetic init error: {0}")]
    SyntheticInit(String),

    #[error("coreset selection error: {0}")]
    Selection(String),

    #[error("gradient-set structure mismatch: {0}")]
    Structure(String),

    #[error("class-count mismatch: expected {expected}, got {got}")]
    ClassCount { expected: usize, got: usize },

    #[error("distance spec parse error: {0}")]
    DistanceSpec(String),

    #[error("divergence at outer {outer} inner {inner}: {msg}")]
    Divergence {
        outer: usize,
        inner: usize,
        msg: String,
    },

    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("config error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cross-architecture matrix error for pair ({source_arch}, {target_arch}): {msg}")]
    Matrix {
        source_arch: String,
        target_arch: String,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 divergence, 4 I/O, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } | Error::Training { .. } | Error::NonFinite { .. } => 3,
            Error::Io(_) | Error::Format { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
