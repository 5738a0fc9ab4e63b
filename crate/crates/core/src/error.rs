use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights file {path}: {reason}")]
    WeightsFormat { path: String, reason: String },

    #[error("unknown wiring array {0}")]
    UnknownArray(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("node {node}: {reason}")]
    Cluster { node: u32, reason: String },

    #[error("timed out waiting for node {node}")]
    Timeout { node: u32 },

    #[error("activation divergence at token {token}, layer {layer}: node {node} disagrees")]
    Determinism { node: u32, token: u64, layer: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
