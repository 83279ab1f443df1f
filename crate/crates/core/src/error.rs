//! Crate-wide error type and the exit-code mapping used by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad parameter ranges, unknown keys, mechanism
    /// combinations that have no defined generative model.
    #[error("config error: {0}")]
    Config(String),

    /// Structural limits exceeded (covariate dimension, table size).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed or inconsistent input data (CSV schema, availability rule,
    /// cross-file mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Estimation cannot proceed: empty strata after filtering, degenerate
    /// targets, mismatched cohorts.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A closed form hit a zero denominator or an otherwise singular regime.
    #[error("singular regime: {0}")]
    Singularity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = configuration error, 3 = data
    /// error, 4 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Capacity(_) => 2,
            Error::Data(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
