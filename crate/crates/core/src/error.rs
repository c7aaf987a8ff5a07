use thiserror::Error;

/// Errors raised by the estimation, solution and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("perfect separation on indicator `{0}`")]
    Separation(String),

    #[error("empty data: {0}")]
    Empty(String),

    #[error("insufficient data at age {age}: {detail}")]
    Insufficient { age: u32, detail: String },

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("no feasible choice at {0}")]
    Infeasible(String),

    #[error("root not bracketed: {0}")]
    Bracketing(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),
}

pub type Result<T> = std::result::Result<T, Error>;
