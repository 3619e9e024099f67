use thiserror::Error;

/// Errors raised across the solver, inference and optimization layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Model or configuration data violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument is out of its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A fixed-point iteration did not reach tolerance.
    #[error("no convergence after {iterations} sweeps (last residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },

    /// The observation sequence has probability zero under every type.
    #[error("observation sequence has zero evidence")]
    ZeroEvidence,

    /// Exact enumeration would visit more sequences than allowed.
    #[error("exact enumeration needs {sequences} sequences, cap is {cap}; use the sampled estimator")]
    EnumerationCap { sequences: u128, cap: u64 },

    /// A linear system that should be nonsingular was not.
    #[error("singular linear system: {0}")]
    Singular(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::ZeroEvidence | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
