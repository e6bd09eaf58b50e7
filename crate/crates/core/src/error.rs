use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("attention map of {positions} positions exceeds the cap of {cap}; apply the block tiled or strided")]
    AttentionTooLarge { positions: usize, cap: usize },

    #[error("allocation infeasible: minimum achievable mean bpp is {min_bpp:.6}, target is {target:.6}")]
    Infeasible { min_bpp: f64, target: f64 },

    #[error("codec command `{command}` failed ({}):\n{output}", describe_status(*.status))]
    Codec {
        command: String,
        /// Exit code, if the process ran and exited normally.
        status: Option<i32>,
        output: String,
    },

    #[error("archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.to_string(),
        }
    }
}

fn describe_status(status: Option<i32>) -> String {
    match status {
        Some(code) => format!("exit status {code}"),
        None => "no exit status".into(),
    }
}
