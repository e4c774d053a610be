use std::path::PathBuf;

use lic_core::Error as CoreError;
use lic_drm::DrmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    StageOrder(String),
    #[error("{}: {detail}", path.display())]
    Artifact { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Drm(#[from] DrmError),
    #[error("{0} artifact(s) failed verification")]
    Verify(usize),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit status for each error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const STAGE_ORDER: i32 = 3;
    pub const IO: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const WATERMARK: i32 = 6;
    pub const AUTH: i32 = 7;
    pub const NUMERIC: i32 = 8;
}

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Io(_) => exit::IO,
        CoreError::Format { .. } | CoreError::UnsupportedVersion { .. } | CoreError::Corrupt(_) | CoreError::ModelMismatch { .. } => {
            exit::FORMAT
        }
        CoreError::EmbeddingFailed { .. } => exit::WATERMARK,
        CoreError::Diverged { .. } | CoreError::NonFinite(_) | CoreError::Overflow { .. } => exit::NUMERIC,
        CoreError::InvalidArgument(_) | CoreError::Shape { .. } | CoreError::Empty(_) => exit::USAGE,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::USAGE,
            CliError::StageOrder(_) => exit::STAGE_ORDER,
            CliError::Artifact { .. } | CliError::Verify(_) => exit::FORMAT,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => core_code(e),
            CliError::Drm(e) => match e {
                DrmError::Core(c) => core_code(c),
                DrmError::Authentication | DrmError::WrongRecipient { .. } | DrmError::KeyFile(_) => exit::AUTH,
                DrmError::WatermarkMismatch { .. } => exit::WATERMARK,
                DrmError::Metadata(_) => exit::FORMAT,
                DrmError::EmptyRegistry => exit::USAGE,
                DrmError::Io(_) => exit::IO,
            },
        }
    }

    /// Short machine-readable class name for `--json` error output.
    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            exit::USAGE => "usage",
            exit::STAGE_ORDER => "stage_order",
            exit::IO => "io",
            exit::FORMAT => "format",
            exit::WATERMARK => "watermark",
            exit::AUTH => "authentication",
            exit::NUMERIC => "numeric",
            _ => "internal",
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
