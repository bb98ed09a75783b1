use thiserror::Error;

use crate::ir::parse::ParseError;
use crate::ir::Diagnostic;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("invalid module:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("recursion rejected: {0}")]
    Recursion(String),
    #[error("unboundable loop at `{header}` in `{function}`")]
    UnboundableLoop { function: String, header: String },
    #[error("cannot transform `{function}` at `{block}`: {message}")]
    Transform { function: String, block: String, message: String },
    #[error("trap at {site}: {message}")]
    Trap { site: String, message: String },
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn transform(function: &str, block: &str, message: impl Into<String>) -> Error {
        Error::Transform { function: function.into(), block: block.into(), message: message.into() }
    }
}
