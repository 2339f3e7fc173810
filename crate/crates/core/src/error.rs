use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error at {at}: {message}")]
    Shape { at: String, message: String },

    #[error("numeric error at {at}: {message}")]
    Numeric { at: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint load failed: {0}")]
    Load(LoadReport),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(at: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { at: at.into(), message: message.into() }
    }

    pub fn numeric(at: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric { at: at.into(), message: message.into() }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format(message.into())
    }
}

/// Offending entries found while matching an archive against an expected layout.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub misshaped: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.misshaped.is_empty()
    }
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing [{}]", self.missing.join(", ")));
        }
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected [{}]", self.unexpected.join(", ")));
        }
        for (name, want, got) in &self.misshaped {
            parts.push(format!("{name}: expected {want:?}, found {got:?}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}
