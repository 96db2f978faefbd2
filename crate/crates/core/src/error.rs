use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },

    /// A value violates a documented invariant (degenerate box, weight <= 0, ...).
    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    /// A record was structurally well-formed JSON but failed schema validation.
    #[error("{context}: field `{field}`: {message}")]
    Schema {
        context: String,
        field: String,
        message: String,
    },

    #[error("template parse error at byte {offset}: expected {expected}")]
    Parse { offset: usize, expected: String },

    #[error("no parsed votes: all {unparseable} responses were unparseable")]
    NoVotes { unparseable: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        report: Box<crate::encoder::TrainReport>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn schema(
        context: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Schema {
            context: context.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}
