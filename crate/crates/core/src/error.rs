//! Crate-wide error types.
//!
//! Errors split into two families that callers treat differently: validation
//! problems (bad input files, malformed configs, impossible graph requests)
//! and numerical failures (non-finite values, shape mismatches mid-compute).
//! The CLI maps the former to exit code 1 and the latter to exit code 2.

use std::path::PathBuf;

/// Failures inside the tensor/tape/optimizer layer.
#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("variable does not belong to this tape")]
    DetachedVar,
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{what} must be even, got {got}")]
    OddWidth { what: &'static str, got: usize },
    #[error("empty input to {op}")]
    Empty { op: &'static str },
    #[error("gradient for {name} is non-finite")]
    NonFiniteGrad { name: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: stored shape {got:?} does not match expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Failures while building or serializing relational graphs.
#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("instance {id}: document {doc} has no sentences")]
    EmptyDocument { id: String, doc: usize },
    #[error("instance {id}: {what}")]
    BadInstance { id: String, what: String },
    #[error("graph file {path}: {what}")]
    BadGraphFile { path: String, what: String },
    #[error("graph file version {got:?} is not supported (expected {expected})")]
    Version { expected: &'static str, got: String },
    #[error("edge references node {index} but graph has {n_nodes} nodes")]
    EdgeOutOfRange { index: usize, n_nodes: usize },
    #[error("no graphs to summarize")]
    NoGraphs,
}

/// Failures in embedding sources.
#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding table {path}: {what} (line {line})")]
    BadTable {
        path: String,
        what: String,
        line: usize,
    },
    #[error("contextual file {path}: {what}")]
    BadSidecar { path: String, what: String },
    #[error("source {source_name}: missing contextual vector for {key} (strict mode)")]
    MissingContextual { source_name: String, key: String },
    #[error("source {source_name}: expected {expected} dimensions, got {got}")]
    DimMismatch {
        source_name: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding source {0}: io: {1}")]
    Io(String, std::io::Error),
}

/// Failures in dataset handling, configs, and the run harness.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {what}")]
    BadRecord {
        path: String,
        line: usize,
        what: String,
    },
    #[error("instance {id}: {what}")]
    BadInstance { id: String, what: String },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("synthetic spec: {0}")]
    BadSyntheticSpec(String),
    #[error("checkpoint {path}: {what}")]
    BadCheckpoint { path: String, what: String },
    #[error("{path}: io: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Any error this crate can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl Error {
    /// Process exit code the CLI should use for this error: 2 for numerical
    /// failures, 1 for everything else (validation).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Num(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DataError::Json {
            path: path.into(),
            source,
        }
    }
}
