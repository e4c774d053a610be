//! Artifact files: magic detection, loading and directory verification.

use std::path::{Path, PathBuf};

use lic_core::codec::{LicModel, CHECKPOINT_MAGIC};
use lic_core::engine::IntModel;
use lic_core::entropy::{LatentBitstream, BITSTREAM_MAGIC};
use lic_core::quantizer::{QuantizedModel, QUANT_MAGIC};
use lic_drm::envelope::MAGIC as ENCRYPTED_MAGIC;
use lic_drm::{ClientIdentity, EncryptedContainer, Metadata, Unlocker};
use serde::Serialize;

use crate::error::{io_err, CliError, Result};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    FloatCheckpoint,
    QuantizedModel,
    Bitstream,
    EncryptedContainer,
    Png,
    Json,
    Csv,
    KeyFile,
}

impl Kind {
    /// The kind a file name promises, if it is one we produce.
    pub fn from_path(path: &Path) -> Option<Kind> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        Some(match ext.as_str() {
            "licf" => Kind::FloatCheckpoint,
            "licq" => Kind::QuantizedModel,
            "licb" => Kind::Bitstream,
            "lice" => Kind::EncryptedContainer,
            "png" => Kind::Png,
            "json" => Kind::Json,
            "csv" => Kind::Csv,
            "pub" | "key" => Kind::KeyFile,
            _ => return None,
        })
    }

    pub fn sniff(bytes: &[u8]) -> Option<Kind> {
        let m = bytes.get(..4)?;
        Some(if m == CHECKPOINT_MAGIC {
            Kind::FloatCheckpoint
        } else if m == QUANT_MAGIC {
            Kind::QuantizedModel
        } else if m == BITSTREAM_MAGIC {
            Kind::Bitstream
        } else if m == ENCRYPTED_MAGIC {
            Kind::EncryptedContainer
        } else if bytes.starts_with(PNG_MAGIC) {
            Kind::Png
        } else {
            return None;
        })
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn expect_kind(path: &Path, bytes: &[u8], want: Kind) -> Result<()> {
    match Kind::sniff(bytes) {
        Some(k) if k == want => Ok(()),
        found => Err(CliError::Artifact {
            path: path.to_path_buf(),
            detail: format!("expected a {want:?} file, found {}", found.map_or("unknown data".into(), |k| format!("{k:?}"))),
        }),
    }
}

fn with_path<T>(path: &Path, r: std::result::Result<T, impl Into<CliError>>) -> Result<T> {
    r.map_err(|e| match e.into() {
        CliError::Core(e) => CliError::Artifact {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
        other => other,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LicModel> {
    let b = read(path)?;
    expect_kind(path, &b, Kind::FloatCheckpoint)?;
    with_path(path, LicModel::from_bytes(&b))
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let b = read(path)?;
    expect_kind(path, &b, Kind::QuantizedModel)?;
    with_path(path, QuantizedModel::from_bytes(&b))
}

pub fn load_bitstream(path: &Path) -> Result<LatentBitstream> {
    let b = read(path)?;
    expect_kind(path, &b, Kind::Bitstream)?;
    with_path(path, LatentBitstream::from_bytes(&b))
}

pub fn load_container(path: &Path) -> Result<EncryptedContainer> {
    let b = read(path)?;
    expect_kind(path, &b, Kind::EncryptedContainer)?;
    Ok(EncryptedContainer::from_bytes(&b)?)
}

/// A deployable model: plain `LICQ`, or `LICE` unlocked in memory.
pub struct LoadedModel {
    pub engine: IntModel,
    pub metadata: Option<Metadata>,
}

pub fn load_int_model(path: &Path, identity: Option<&ClientIdentity>) -> Result<LoadedModel> {
    let b = read(path)?;
    match Kind::sniff(&b) {
        Some(Kind::QuantizedModel) => Ok(LoadedModel {
            engine: with_path(path, IntModel::from_bytes(&b))?,
            metadata: None,
        }),
        Some(Kind::EncryptedContainer) => {
            let id = identity.ok_or_else(|| {
                CliError::Config(format!("{} is encrypted; pass --key with the client private key", path.display()))
            })?;
            let c = EncryptedContainer::from_bytes(&b)?;
            let (metadata, engine) = Unlocker::new(id).unlock_and_load(&c)?;
            Ok(LoadedModel {
                engine,
                metadata: Some(metadata),
            })
        }
        Some(Kind::FloatCheckpoint) => Err(CliError::StageOrder(format!(
            "{} is a float checkpoint; run `lic qaw` to produce a deployable integer model",
            path.display()
        ))),
        _ => Err(CliError::Artifact {
            path: path.to_path_buf(),
            detail: "not a LICQ model or LICE container".into(),
        }),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyEntry {
    pub path: PathBuf,
    pub kind: Kind,
    pub ok: bool,
    pub detail: String,
}

fn check_file(path: &Path, kind: Kind) -> std::result::Result<String, String> {
    let b = std::fs::read(path).map_err(|e| e.to_string())?;
    let magic_ok = |want: Kind| match Kind::sniff(&b) {
        Some(k) if k == want => Ok(()),
        _ => Err(format!("missing {want:?} magic bytes")),
    };
    match kind {
        Kind::FloatCheckpoint => {
            magic_ok(kind)?;
            let m = LicModel::from_bytes(&b).map_err(|e| e.to_string())?;
            Ok(format!("{} parameters, pruned={}", m.param_count(), m.pruned))
        }
        Kind::QuantizedModel => {
            magic_ok(kind)?;
            let q = QuantizedModel::from_bytes(&b).map_err(|e| e.to_string())?;
            Ok(format!("hash {}", hex::encode(q.hash())))
        }
        Kind::Bitstream => {
            magic_ok(kind)?;
            let s = LatentBitstream::from_bytes(&b).map_err(|e| e.to_string())?;
            Ok(format!("{}x{}, {} payload bytes", s.width, s.height, s.payload_bytes()))
        }
        Kind::EncryptedContainer => {
            magic_ok(kind)?;
            let c = EncryptedContainer::from_bytes(&b).map_err(|e| e.to_string())?;
            Ok(format!("addressed to {}", hex::encode(c.key_id)))
        }
        Kind::Png => magic_ok(kind).map(|_| String::new()),
        Kind::Json => serde_json::from_slice::<serde_json::Value>(&b)
            .map(|_| String::new())
            .map_err(|e| e.to_string()),
        Kind::Csv => {
            let text = std::str::from_utf8(&b).map_err(|e| e.to_string())?;
            let mut lines = text.lines();
            let cols = lines.next().ok_or("empty CSV")?.split(',').count();
            match lines.position(|l| l.split(',').count() != cols) {
                Some(i) => Err(format!("row {} has the wrong column count", i + 1)),
                None => Ok(format!("{cols} columns")),
            }
        }
        Kind::KeyFile => {
            let text = std::str::from_utf8(&b).map_err(|e| e.to_string())?;
            if text.starts_with("-----BEGIN LIC ") {
                Ok(String::new())
            } else {
                Err("missing BEGIN line".into())
            }
        }
    }
}

/// Checks every recognized artifact under `dir`, recursively.
pub fn verify_dir(dir: &Path) -> Result<Vec<VerifyEntry>> {
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(io_err(&d))? {
            let p = e.map_err(io_err(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files
        .into_iter()
        .filter_map(|p| {
            let kind = Kind::from_path(&p)?;
            let (ok, detail) = match check_file(&p, kind) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Some(VerifyEntry { path: p, kind, ok, detail })
        })
        .collect())
}
