use thiserror::Error;

/// Errors raised by every layer of the solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("{what}: {atoms} atoms exceeds the limit of {limit}")]
    SizeLimit {
        what: &'static str,
        atoms: usize,
        limit: usize,
    },

    #[error("Legendre transform did not converge after {iterations} Newton steps (gradient {residual:e})")]
    LegendreNoConvergence { iterations: usize, residual: f64 },

    #[error("particle left the guard box at t = {time}: |x| = {norm}")]
    ParticleEscape { time: f64, norm: f64 },

    #[error(
        "fixed point does not contract on [{t0}, {t1}] (iteration {iteration}, ratios {ratios:?})"
    )]
    NonContraction {
        t0: f64,
        t1: f64,
        iteration: usize,
        ratios: Vec<f64>,
    },

    #[error("no convergence on [{t0}, {t1}] after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        t0: f64,
        t1: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for the failures that mean the horizon is too long for the fixed point.
    pub fn is_non_contraction(&self) -> bool {
        matches!(
            self,
            Error::NonContraction { .. } | Error::NoConvergence { .. } | Error::ParticleEscape { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
        })
    }
}
