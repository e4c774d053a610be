//! Stage implementations behind the `lic` binary.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod error;
pub mod layout;
pub mod stages;

pub use config::{Overrides, PipelineConfig};
pub use error::{exit, CliError, Result};
