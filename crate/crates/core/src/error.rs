use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, descriptors or grid settings, caught before any computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("particle simulation diverged at t = {t} (max |v| = {max_abs_v})")]
    Divergence { t: f64, max_abs_v: f64 },

    #[error("time step {dt} exceeds the stability bound {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("grid scheme produced a negative cell value {value} at t = {t}")]
    NegativeDensity { value: f64, t: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("support violation: reference density vanishes where the density is {value:e}")]
    Support { value: f64 },

    #[error("unconfined quadratic interaction: 1 + 2 lambda a = {stiffness} <= 0")]
    Unconfined { stiffness: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
