use thiserror::Error;

#[derive(Debug, Error)]
pub enum XaneError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate edge step: |delta mu| = {0} <= 1e-6")]
    DegenerateEdge(f64),

    #[error("insufficient points in {window} fit window: {count} < 3")]
    FitWindow { window: &'static str, count: usize },

    #[error("raw spectrum does not cover the canonical grid: [{have_lo}, {have_hi}] vs required [{need_lo}, {need_hi}] (relative eV)")]
    GridNotCovered {
        have_lo: f64,
        have_hi: f64,
        need_lo: f64,
        need_hi: f64,
    },

    #[error("non-deterministic function: two evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, XaneError>;
