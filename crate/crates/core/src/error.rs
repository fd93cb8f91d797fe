use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Each variant maps to a short category string used by the command line
/// front end, so failures can be grepped as `error[<category>]`.
#[derive(Debug, Error)]
pub enum TfnError {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("load error: {0}")]
    Load(String),
}

impl TfnError {
    pub fn category(&self) -> &'static str {
        match self {
            TfnError::Format(_) => "format",
            TfnError::UnsupportedFormat(_) => "unsupported-format",
            TfnError::Io(_) => "io",
            TfnError::Parameter(_) => "parameter",
            TfnError::Shape(_) => "shape",
            TfnError::InputTooShort { .. } => "input-too-short",
            TfnError::Config(_) => "config",
            TfnError::DegenerateBatch(_) => "degenerate-batch",
            TfnError::Load(_) => "load",
        }
    }

    /// The message without its category prefix.
    pub fn detail(&self) -> String {
        match self {
            TfnError::Format(m)
            | TfnError::UnsupportedFormat(m)
            | TfnError::Parameter(m)
            | TfnError::Shape(m)
            | TfnError::Config(m)
            | TfnError::DegenerateBatch(m)
            | TfnError::Load(m) => m.clone(),
            TfnError::Io(e) => e.to_string(),
            TfnError::InputTooShort { needed, got } => {
                format!("need at least {needed} samples, got {got}")
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, TfnError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TfnError::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TfnError::Parameter(msg.into()))
}
