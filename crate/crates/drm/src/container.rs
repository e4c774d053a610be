//! `LICM` plaintext model container: metadata plus a `LICQ` model payload.
//!
//! ```text
//! magic "LICM" | u16 version | u32 meta_len | canonical JSON metadata
//! | u64 payload_len | LICQ bytes
//! ```
//! Canonical JSON has object keys sorted and no insignificant whitespace, so
//! the same metadata always produces the same bytes.

use lic_core::format::{ByteReader, ByteWriter};
use lic_core::quantizer::QuantizedModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DrmError, Result};

pub const MAGIC: &[u8; 4] = b"LICM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Hex SHA-256 of the recipient's public key.
    pub client_id: String,
    /// Hex SHA-256 of the `LICQ` payload.
    pub model_hash: String,
    pub lambda: f64,
    pub target_layer: usize,
    pub bits: usize,
}

/// Serializes `v` with sorted object keys and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

impl Metadata {
    pub fn canonical(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("metadata serializes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub metadata: Metadata,
    pub payload: Vec<u8>,
}

impl ModelContainer {
    pub fn new(metadata: Metadata, model: &QuantizedModel) -> Self {
        ModelContainer {
            metadata,
            payload: model.to_bytes(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata.canonical();
        let mut w = ByteWriter::new();
        w.bytes(MAGIC).u16(VERSION).u32(meta.len() as u32).bytes(meta.as_bytes());
        w.u64(self.payload.len() as u64).bytes(&self.payload);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("model container", bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u32()? as usize;
        let raw = r.take(n)?;
        let text = std::str::from_utf8(raw).map_err(|e| DrmError::Metadata(e.to_string()))?;
        let metadata: Metadata = serde_json::from_str(text).map_err(|e| DrmError::Metadata(e.to_string()))?;
        if metadata.canonical() != text {
            return Err(DrmError::Metadata("metadata is not in canonical form".into()));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| DrmError::Metadata("payload too large".into()))?;
        let payload = r.take(len)?.to_vec();
        r.finish()?;
        Ok(ModelContainer { metadata, payload })
    }

    /// Parses the payload and checks it against `model_hash`.
    pub fn model(&self) -> Result<QuantizedModel> {
        let qm = QuantizedModel::from_bytes(&self.payload)?;
        let found = hex::encode(qm.hash());
        if found != self.metadata.model_hash {
            return Err(lic_core::Error::ModelMismatch {
                expected: self.metadata.model_hash.clone(),
                found,
            }
            .into());
        }
        Ok(qm)
    }
}
