use thiserror::Error;

/// Errors raised across the lab. Every variant names the offending input so
/// callers can report it without extra context.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid domain: {field}: {reason}")]
    Domain { field: &'static str, reason: String },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("non-finite value in {what} (p = {p}, scale = {scale})")]
    NonFinite { what: &'static str, p: f64, scale: f64 },

    #[error("solver did not converge at p = {p}: {iterations} iterations, relative residual {residual:.3e}")]
    NotConverged {
        p: f64,
        iterations: usize,
        residual: f64,
        best: Box<crate::mesh::NodalField>,
    },

    #[error("state not converged: residual {residual:.3e} exceeds {tolerance:.3e}")]
    Unconverged { residual: f64, tolerance: f64 },

    #[error("competitor disagrees with current: {reason} (worst test form #{form}, mismatch {mismatch:.3e})")]
    Competitor {
        reason: &'static str,
        form: usize,
        mismatch: f64,
    },

    #[error("continuation aborted at stage {stage} (p = {p}): {source}")]
    Stage {
        stage: usize,
        p: f64,
        #[source]
        source: Box<LabError>,
    },

    #[error("expression error at offset {offset}: {reason}")]
    Expr { offset: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
