use std::io;

/// Errors produced anywhere in the compression toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad {what} file: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u32 },

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("layer {layer}: {detail}")]
    Overflow { layer: usize, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("watermark not embedded after {steps} steps (C-BER {c_ber:.2}, beta {beta:.4e})")]
    EmbeddingFailed { steps: usize, c_ber: f64, beta: f64 },

    #[error("model hash mismatch: bitstream expects {expected}, model is {found}")]
    ModelMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(detail: impl Into<String>) -> Error {
    Error::InvalidArgument(detail.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        detail: detail.into(),
    }
}
