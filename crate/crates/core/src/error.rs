use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// NNet text format error. `line` is 1-based.
    #[error("nnet parse error at line {line}: {msg}")]
    NNet { line: usize, msg: String },

    /// JSON network error. `path` is a JSON-path style location such as `$.layers[2].type`.
    #[error("json network error at {path}: {msg}")]
    Json { path: String, msg: String },

    /// VNN-LIB error. `location` is the s-expression path of the offending node.
    #[error("vnnlib parse error at {location}: {msg}")]
    VnnLib { location: String, msg: String },

    #[error("witness parse error: {0}")]
    Witness(String),
}

pub type Result<T> = std::result::Result<T, Error>;
