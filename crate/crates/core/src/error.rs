use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid parameter `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },
    #[error("unknown maneuver `{name}`; known maneuvers: {}", suggestions.join(", "))]
    UnknownManeuver { name: String, suggestions: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid { name, reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("input-rate weight must be positive, got {0}")]
    NonPositiveInputWeight(f64),
    #[error("weight matrix `{0}` is not symmetric positive semi-definite")]
    NotPsd(&'static str),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("Hessian condition number bound {bound:.3e} exceeds {limit:.1e}")]
    IllConditioned { bound: f64, limit: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("gain cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at step {step} (t = {t:.3} s): {dump}")]
    NonFinite { step: usize, t: f64, dump: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("trace export: {0}")]
    Export(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum TunerError {
    #[error("invalid bounds for dimension `{name}`: {reason}")]
    Bounds { name: String, reason: String },
    #[error("pair ({0}, {1}) already has a recorded preference")]
    DuplicatePreference(usize, usize),
    #[error("pair ({0}, {1}) does not refer to evaluated points")]
    UnknownPoint(usize, usize),
    #[error("pair ({0}, {1}) was not the pending comparison")]
    NotPending(usize, usize),
    #[error("no preference recorded yet")]
    NoPreferences,
    #[error("session schema version {found} is not supported (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error("session has converged; no pending comparison")]
    Converged,
    #[error("session file: {0}")]
    Format(String),
}
