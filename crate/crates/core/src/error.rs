use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of a public operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value in {stage} at layer {layer}, token {token}")]
    NonFinite {
        stage: &'static str,
        layer: usize,
        token: usize,
    },

    #[error("client {client} diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        client: usize,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
