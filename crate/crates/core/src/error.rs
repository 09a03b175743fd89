use std::path::PathBuf;

use serde::Serialize;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs of an operation was violated.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent data in a named file.
    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at position {position}: {message} (raw: {raw:?})")]
    Parse {
        raw: String,
        position: usize,
        message: String,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("generation error: {message} (raw answer: {raw_answer:?})")]
    Generation { raw_answer: String, message: String },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Data { .. } => "data",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Training(_) => "training",
            Error::Generation { .. } => "generation",
            Error::Format(_) => "format",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Payload<'a> {
            error: &'a str,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<String>,
        }
        let path = match self {
            Error::Data { path, .. } | Error::Io { path, .. } => Some(path.display().to_string()),
            _ => None,
        };
        serde_json::to_value(Payload {
            error: self.kind(),
            message: self.to_string(),
            path,
        })
        .unwrap_or(serde_json::Value::Null)
    }
}
