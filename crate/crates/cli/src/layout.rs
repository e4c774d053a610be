//! File names of every stage artifact.

use std::path::PathBuf;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub struct Layout<'a>(pub &'a PipelineConfig);

impl Layout<'_> {
    fn out(&self, name: impl AsRef<str>) -> PathBuf {
        self.0.paths.out.join(name.as_ref())
    }

    fn keys(&self, name: impl AsRef<str>) -> PathBuf {
        self.0.paths.keys.join(name.as_ref())
    }

    pub fn report(&self, stage: &str) -> PathBuf {
        self.out(format!("{stage}.json"))
    }

    pub fn model(&self) -> PathBuf {
        self.out("model.licf")
    }

    pub fn train_trace(&self) -> PathBuf {
        self.out("train_trace.csv")
    }

    pub fn pruned(&self) -> PathBuf {
        self.out("pruned.licf")
    }

    pub fn prune_csv(&self) -> PathBuf {
        self.out("prune.csv")
    }

    pub fn qaw_model(&self, client: &str) -> PathBuf {
        self.out(format!("qaw-{client}.licq"))
    }

    pub fn beta_trace(&self, client: &str) -> PathBuf {
        self.out(format!("qaw-{client}_beta.csv"))
    }

    pub fn twin(&self) -> PathBuf {
        self.out("qat-twin.licq")
    }

    pub fn container(&self, client: &str) -> PathBuf {
        self.out(format!("{client}.lice"))
    }

    pub fn provider(&self) -> PathBuf {
        self.keys("provider.json")
    }

    pub fn registry(&self) -> PathBuf {
        self.keys("registry.json")
    }

    pub fn public_key(&self, client: &str) -> PathBuf {
        self.keys(format!("{client}.pub"))
    }

    pub fn private_key(&self, client: &str) -> PathBuf {
        self.keys(format!("{client}.key"))
    }
}

/// Client ids become file names, so keep them to a safe alphabet.
pub fn check_client_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > 64 || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(CliError::Config(format!(
            "client id {id:?} must be 1-64 characters of [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}
