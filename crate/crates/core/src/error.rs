use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph contains a directed cycle")]
    CyclicInput,

    #[error("rank-deficient design: smallest/largest pivot ratio {ratio:.3e} below 1e-10")]
    RankDeficient { ratio: f64 },

    #[error("column set B is not contained in column set A")]
    NotNested,

    #[error("coordinate descent did not converge within {sweeps} sweeps")]
    MaxIterations { sweeps: usize },

    #[error("peeling stalled at height {height}: no instrument-leaf pair among {remaining} remaining nodes")]
    PeelStalled {
        height: usize,
        /// 1-based indices of the nodes left unpeeled.
        remaining_nodes: Vec<usize>,
        remaining: usize,
    },

    #[error("sparsity budget {budget} exceeds {available} available predictors for node {node}")]
    BudgetExceedsPredictors {
        node: usize,
        budget: usize,
        available: usize,
    },

    #[error("degrees of freedom exhausted for node {node}: n = {n}, predictors = {predictors}")]
    DegreesOfFreedomExhausted {
        node: usize,
        n: usize,
        predictors: usize,
    },

    #[error("none of the {replicates} perturbation replicates contained the original super-graph")]
    NoContainedReplicates { replicates: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("missing value at line {line}, column {column}")]
    MissingValue { line: usize, column: usize },

    #[error("row count mismatch: Y has {y_rows} rows, X has {x_rows}")]
    RowMismatch { y_rows: usize, x_rows: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures that come from the numerics rather than the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::MaxIterations { .. }
                | Error::PeelStalled { .. }
                | Error::NoContainedReplicates { .. }
                | Error::DegreesOfFreedomExhausted { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
