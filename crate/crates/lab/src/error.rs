use serde_json::{json, Value};

/// Failure of a lab command, rendered as JSON on standard error.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] esc_core::Error),
    #[error("rates are not admissible: {message}")]
    Inadmissible { message: String, report: Value },
    #[error("{0}")]
    Divergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Core(_) => "validation",
            Self::Inadmissible { .. } => "inadmissible_rates",
            Self::Divergence(_) => "divergence",
            Self::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Divergence(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        if let Self::Inadmissible { report, .. } = self {
            v["report"] = report.clone();
        }
        v
    }
}

pub type LabResult<T> = Result<T, LabError>;

pub fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}
