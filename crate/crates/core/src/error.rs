use thiserror::Error;

/// Errors surfaced by the simulation, identification and reporting layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("graph generation gave up after {attempts} attempts: {reason}")]
    RetryBudgetExhausted { attempts: usize, reason: String },

    #[error("stubborn degree {d} exceeds stubborn count {n_stub}")]
    DegreeTooLarge { d: usize, n_stub: usize },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("empty snapshot set")]
    EmptySnapshots,

    #[error("self-trust of normal agent {row} is {value}, relative trust undefined")]
    SelfTrustSaturated { row: usize, value: f64 },

    #[error("scaling drives diagonal entry {row} negative ({value})")]
    NegativeDiagonal { row: usize, value: f64 },

    #[error("residual tolerance {epsilon} infeasible: best achievable residual is {best}")]
    InfeasibleTolerance { epsilon: f64, best: f64 },

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("undefined condition: {0}")]
    UndefinedCondition(String),

    #[error("no feasible stubborn fraction in ({lower}, 1) for d = {d}")]
    NoFeasibleFraction { d: usize, lower: f64 },

    #[error("normalization by an all-zero truth matrix")]
    ZeroDenominator,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("trial {trial} (n_s = {n_stub}): {source}")]
    Trial {
        trial: usize,
        n_stub: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
