//! Encrypted, per-client watermarked model distribution.

pub mod container;
pub mod envelope;
pub mod error;
pub mod keys;
pub mod registry;

pub use container::{Metadata, ModelContainer};
pub use envelope::{check_watermark, package, seal, unlock, unlock_and_load, EncryptedContainer, Unlocker};
pub use error::{DrmError, Result};
pub use keys::{ClientIdentity, ClientPublic, PASSPHRASE_ENV};
pub use registry::{trace_leak, ClientRecord, Registry, TraceMatch, WatermarkPolicy};
