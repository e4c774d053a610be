#[derive(Debug, thiserror::Error)]
pub enum DrmError {
    #[error(transparent)]
    Core(#[from] lic_core::Error),

    /// Tag or key-unwrap verification failed; no plaintext is released.
    #[error("authentication failed: container was modified or is addressed to another key")]
    Authentication,

    #[error("container is addressed to key {expected}, not {found}")]
    WrongRecipient { expected: String, found: String },

    #[error("refusing to package: watermark for client {client} reads back at C-BER {c_ber:.2}, not 100")]
    WatermarkMismatch { client: String, c_ber: f64 },

    #[error("client registry is empty")]
    EmptyRegistry,

    #[error("bad key file: {0}")]
    KeyFile(String),

    #[error("bad metadata: {0}")]
    Metadata(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DrmError> = std::result::Result<T, E>;
