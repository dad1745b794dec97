use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operation requires a bounded domain")]
    UnboundedDomain,

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("operator does not provide {0}")]
    Unsupported(&'static str),

    #[error("operator returned non-finite values at the query point")]
    NonFinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("secant pair {index} has a zero-norm step")]
    ZeroStep { index: usize },

    #[error("history holds {got} points, at least {needed} required")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("shifted low-rank system is ill-conditioned ({0})")]
    IllConditioned(String),

    #[error("subsolver hit {iters} iterations without meeting the acceptance criterion (best lhs/rhs = {best_ratio:.3e})")]
    MaxIters { iters: usize, best_ratio: f64 },

    #[error("ray search found no sign change up to tau = {tau_max:.3e}")]
    NoSignChange { tau_max: f64 },

    #[error("ray search exhausted {iters} bisections with residual {upsilon:.3e} > {eps:.3e}")]
    BisectionBudget { iters: usize, upsilon: f64, eps: f64 },

    #[error("refinement budget of {budget} steps exceeded (ratio {ratio:.3e})")]
    RefineBudget { budget: usize, ratio: f64 },

    #[error("step-size denominator vanished")]
    ZeroDenominator,

    #[error("lambda {lambda:.6e} leaves the bracket [{lo:.6e}, {hi:.6e}]")]
    BracketViolation { lambda: f64, lo: f64, hi: f64 },

    #[error("Jacobian inexactness along the step exceeds L/2 * |x - v| ({lhs:.3e} > {rhs:.3e})")]
    InexactnessViolation { lhs: f64, rhs: f64 },

    #[error("matrix is not monotone (min eigenvalue of symmetric part {0:.3e})")]
    NotMonotone(f64),

    #[error("degenerate fitting window: {0}")]
    DegenerateWindow(String),

    /// The message already carries the cause, so it is not chained as a
    /// source (that would print it twice).
    #[error("iteration {iter}: {cause}")]
    AtIteration { iter: usize, cause: Box<Error> },
}

impl Error {
    pub(crate) fn at(self, iter: usize) -> Error {
        match self {
            e @ Error::AtIteration { .. } => e,
            e => Error::AtIteration {
                iter,
                cause: Box::new(e),
            },
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
