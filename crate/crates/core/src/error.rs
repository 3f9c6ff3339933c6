use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A coefficient evaluator produced NaN or an infinity.
    #[error("non-finite output from `{what}` at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("state exploded at step {step} (|X| = {norm:e})")]
    Explosion { step: usize, norm: f64 },

    #[error("ill-conditioned regression: {0}")]
    IllConditioned(String),

    #[error("fixed-point iteration in y did not converge at step {step}")]
    FixedPoint { step: usize },

    #[error("|Y| = {value:e} exceeds abort threshold {threshold:e} at step {step}")]
    BoundViolation { step: usize, value: f64, threshold: f64 },

    #[error("stochastic exponent overflow at step {step} (|log| = {log:e})")]
    ExponentOverflow { step: usize, log: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate parameter set: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
