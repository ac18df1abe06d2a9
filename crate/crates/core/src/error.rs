use thiserror::Error;

/// Errors surfaced by every stage of the pipeline, from instance generation
/// to extraction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("instance generation failed: {0}")]
    GenerationFailure(String),

    #[error("sparsity graph is not a chain: edge ({0}, {1})")]
    NotAChain(usize, usize),

    #[error("invalid decomposition: {0}")]
    DecompositionInvalid(String),

    #[error("inconsistent input: {0}")]
    InconsistentInput(String),

    #[error("infeasible input: {0}")]
    InfeasibleInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate solution: {0}")]
    DegenerateSolution(String),

    #[error("extraction failed: {0}")]
    ExtractionFailure(String),

    #[error("ADMM iteration {iteration}: {source}")]
    Admm {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
