use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("column '{column}' has zero variance; standardization is undefined")]
    ZeroVariance { column: String },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("solver failed to converge after {attempts} attempt(s); best max |residual| = {best_residual:e}")]
    ConvergenceFailure { attempts: usize, best_residual: f64 },

    #[error("model is not identifiable: {0}")]
    Identifiability(String),

    #[error("summary validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::RankDeficient { .. }
            | Error::Divergence(_)
            | Error::ConvergenceFailure { .. }
            | Error::Identifiability(_) => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
