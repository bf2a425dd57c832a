use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("eigensolver failed: {0}")]
    EigenFailure(String),

    #[error("design is rank deficient: {0}")]
    RankDeficientDesign(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("corrector diverged at continuation step {step} (gradient norm {grad_norm:.3e}); retry with more steps")]
    CorrectorDivergence { step: usize, grad_norm: f64 },

    #[error("projected Hessian is indefinite: {0}")]
    IndefiniteHessian(String),

    #[error("newton solve diverged (last residual {residual:.3e})")]
    NewtonDivergence { residual: f64 },

    #[error("CFL violation at time step {step}: CFL = {cfl:.3}")]
    CflViolation { step: usize, cfl: f64 },

    #[error("non-finite state detected at time step {step}")]
    NonFiniteState { step: usize },

    #[error("no feasible start found for design optimization")]
    AllStartsInfeasible,

    #[error("config error: {0}")]
    Config(String),

    #[error("budget misuse: {0}")]
    Budget(String),

    #[error("round {round}: {source}")]
    AtRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv output error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_round(self, round: usize) -> Self {
        Error::AtRound {
            round,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 config, 4 budget, 3 solver/numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Budget(_) => 4,
            Error::AtRound { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
