use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty electorate")]
    EmptyElectorate,

    #[error("empty atom {0}")]
    EmptyAtom(usize),

    #[error("solver did not converge after {0} pivots")]
    SolverDidNotConverge(usize),

    #[error("oracle is small-instance only (got {0} alternatives, max 4)")]
    OracleTooLarge(usize),

    #[error("no equilibrium found by support enumeration")]
    NoEquilibrium,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid lottery: {0}")]
    InvalidLottery(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diverged: non-finite {0}")]
    Diverged(&'static str),

    #[error("collapsed urn (mass {0:e})")]
    CollapsedUrn(f64),

    #[error("head/loss mismatch: {0}")]
    HeadLossMismatch(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
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
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
