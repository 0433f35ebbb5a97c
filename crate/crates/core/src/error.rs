use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every stage of the trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid normal direction: {0}")]
    InvalidNormal(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("{} sample(s) outside the domain bounds: rows {rows:?}", rows.len())]
    OutOfDomain { rows: Vec<usize> },

    #[error("subdomain {0} has no samples left")]
    EmptySubdomain(usize),

    #[error("empty dataset")]
    EmptyData,

    #[error("inconsistent interface data: {0}")]
    InconsistentInterface(String),

    #[error("invalid interface: {0}")]
    InvalidInterface(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The line search could not produce a decrease even from a fresh
    /// (steepest-descent) direction. `best` holds the lowest-loss iterate.
    #[error("line search failed after {iterations} iterations (best loss {best_value:e})")]
    LineSearch {
        best: Vec<f64>,
        best_value: f64,
        iterations: usize,
        non_finite: bool,
    },

    #[error("LMA primal update stalled: {0}")]
    LmaStall(String),

    #[error("dual ascent failed at dual iteration {dual_iter} (mean |Q| = {mean_abs_q:e}): {source}")]
    Dual {
        dual_iter: usize,
        mean_abs_q: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("subdomain {id} failed: {source}")]
    Subdomain {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("interface {id} failed: {source}")]
    Interface {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
