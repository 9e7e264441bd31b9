use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sos degree mismatch: monomial {monomial} of degree {degree} exceeds 2*{half_degree}")]
    SosDegree {
        monomial: String,
        degree: usize,
        half_degree: usize,
    },

    #[error("conic solver failed: {0}")]
    Solver(String),

    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    RiccatiDiverged { iterations: usize, residual: f64 },

    #[error("synthesis infeasible at step {step}: {detail}")]
    StepInfeasible { step: usize, detail: String },

    #[error("consistency set is empty: noise bound inconsistent with the data ({0})")]
    EmptyConsistencySet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
