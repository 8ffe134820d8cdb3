//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entries in {context}")]
    NonFinite { context: &'static str },

    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("linear system is singular or ill-conditioned (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:.3e})")]
    EigNoConvergence { sweeps: usize, off: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("graph is disconnected; buses {component:?} are isolated from bus 1")]
    Disconnected { component: Vec<usize> },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("state diverged (non-finite) at step {step}")]
    Diverged { step: usize },

    #[error("invalid cost specification: {0}")]
    InvalidCost(String),

    #[error("common Lyapunov synthesis failed: worst mode {mode} has margin {margin:.6e} after {steps} steps")]
    SynthesisFailed { mode: usize, margin: f64, steps: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact for stage `{stage}`: {path}")]
    MissingArtifact { stage: &'static str, path: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code classification used by the command-line frontend:
    /// 1 for usage/config problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidGrid(_)
            | Error::InvalidScenario(_)
            | Error::InvalidCost(_)
            | Error::InvalidConfig(_)
            | Error::MissingArtifact { .. }
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::DimensionMismatch(_) => 1,
            _ => 2,
        }
    }
}
