use thiserror::Error;

pub type Result<T> = std::result::Result<T, MeanflowError>;

#[derive(Debug, Error)]
pub enum MeanflowError {
    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    MalformedTransition { state: usize, action: usize, sum: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("feature map returned a non-finite value at (s={state}, a={action}, particle={particle})")]
    NonFiniteFeature { state: usize, action: usize, particle: usize },

    #[error("regularizer {name} evaluated outside its domain at z={z}")]
    Domain { name: &'static str, z: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e}, worst contraction ratio {worst_ratio})")]
    NoConvergence { iterations: usize, residual: f64, worst_ratio: f64 },

    #[error("non-finite particle update at index {particle} (step {step})")]
    NonFiniteUpdate { particle: usize, step: usize },

    #[error("gradient mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("indeterminate: {0}")]
    Indeterminate(String),

    #[error("config invalid:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigViolation>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A single config problem, addressed by a dotted path to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigViolation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}
