use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cut locus: {0}")]
    CutLocus(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },
    #[error("vacuum at node {0}")]
    Vacuum(usize),
    #[error("numerical abort: {0}")]
    Abort(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
