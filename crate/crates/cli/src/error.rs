//! Error type with process exit-code semantics.

use std::fmt;

use semloc_core::CoreError;

/// Exit codes: 0 success, 2 usage, 3 data, 4 internal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(&self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 4,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// For versioned-format mismatches: what the reader wanted and found.
    pub expected: Option<String>,
    pub found: Option<String>,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into(), expected: None, found: None }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into(), expected: None, found: None }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Internal, message: message.into(), expected: None, found: None }
    }

    /// Schema or magic-number mismatch carrying expected/found values.
    pub fn format_mismatch(
        message: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
            expected: Some(expected.into()),
            found: Some(found.into()),
        }
    }

    /// Machine-readable form for `--json-errors`.
    pub fn to_json(&self) -> String {
        let mut obj = serde_json::json!({
            "error": {
                "kind": self.kind.as_str(),
                "message": self.message,
            }
        });
        if let (Some(e), Some(f)) = (&self.expected, &self.found) {
            obj["error"]["expected"] = serde_json::Value::String(e.clone());
            obj["error"]["found"] = serde_json::Value::String(f.clone());
        }
        obj.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)?;
        if let (Some(e), Some(fo)) = (&self.expected, &self.found) {
            write!(f, " (expected {e}, found {fo})")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let kind = match &err {
            CoreError::InvalidConfig(_) => ErrorKind::Usage,
            CoreError::UndefinedMetric
            | CoreError::OutOfMapBounds { .. }
            | CoreError::Generation(_)
            | CoreError::SpawnFailed
            | CoreError::TrajectoryExited
            | CoreError::Tiling { .. }
            | CoreError::BadFrameCount(_) => ErrorKind::Data,
            _ => ErrorKind::Internal,
        };
        Self { kind, message: err.to_string(), expected: None, found: None }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self::data(format!("I/O error: {err}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        Self::data(format!("JSON error: {err}"))
    }
}

impl From<png::DecodingError> for CliError {
    fn from(err: png::DecodingError) -> Self {
        Self::data(format!("PNG decode error: {err}"))
    }
}

impl From<png::EncodingError> for CliError {
    fn from(err: png::EncodingError) -> Self {
        Self::data(format!("PNG encode error: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
