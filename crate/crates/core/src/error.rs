use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("unknown particle id {0}")]
    UnknownParticle(u64),

    #[error("particle event cap exceeded ({events} events > cap {cap})")]
    PopulationCap { events: u64, cap: u64 },

    #[error(
        "rejection budget exhausted after {rejections} rejections (s = {s}, y = {y}{})",
        timestamp.map(|k| format!(", timestamp #{k}")).unwrap_or_default()
    )]
    RejectionBudgetExhausted {
        rejections: u64,
        s: f64,
        y: f64,
        timestamp: Option<usize>,
    },

    #[error("fluctuation statistic undefined at v = {v}: empty level set")]
    UndefinedStatistic { v: f64 },

    #[error("depth {required} not covered by cluster grid (max depth {available})")]
    DepthCoverage { required: f64, available: f64 },

    #[error("depth {0} was not measured in this sample")]
    DepthNotMeasured(f64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
