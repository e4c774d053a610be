//! Client registry and leak tracing.

use std::path::Path;

use lic_core::quantizer::QuantizedModel;
use lic_core::watermark::{chance_band, derive_watermark, extract_quantized, ExtractionReport, KeyMatrix, ProviderKey};
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::keys::ClientPublic;

/// Where and how long the per-client watermark is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkPolicy {
    pub target_layer: usize,
    pub bits: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: String,
    #[serde(with = "hex::serde")]
    pub public_key: [u8; 32],
    #[serde(with = "hex::serde")]
    pub salt: Vec<u8>,
    pub key_seed: u64,
}

impl ClientRecord {
    pub fn new(client: &ClientPublic, provider: &ProviderKey) -> Self {
        let public_key = client.bytes();
        ClientRecord {
            id: client.id.clone(),
            public_key,
            salt: provider.salt.clone(),
            key_seed: provider.client_key_seed(&public_key),
        }
    }

    pub fn extract(&self, qm: &QuantizedModel, policy: &WatermarkPolicy) -> Result<ExtractionReport> {
        let bits = derive_watermark(&self.public_key, &self.salt, policy.bits)?;
        let key = KeyMatrix::for_quantized(self.key_seed, qm, policy.target_layer, policy.bits)?;
        Ok(extract_quantized(qm, &key, &bits)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(flatten)]
    pub policy: WatermarkPolicy,
    pub clients: Vec<ClientRecord>,
}

impl Registry {
    pub fn new(policy: WatermarkPolicy) -> Self {
        Registry {
            policy,
            clients: Vec::new(),
        }
    }

    /// Adds or replaces the record with the same id.
    pub fn register(&mut self, client: &ClientPublic, provider: &ProviderKey) -> &ClientRecord {
        let rec = ClientRecord::new(client, provider);
        let i = match self.clients.iter().position(|c| c.id == rec.id) {
            Some(i) => {
                self.clients[i] = rec;
                i
            }
            None => {
                self.clients.push(rec);
                self.clients.len() - 1
            }
        };
        &self.clients[i]
    }

    pub fn get(&self, id: &str) -> Option<&ClientRecord> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DrmError::Metadata(format!("registry: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMatch {
    pub client: String,
    pub c_ber: f64,
    /// True when the score is indistinguishable from an unmarked model.
    pub in_chance_band: bool,
}

/// Scores every registered client against a leaked model, best first.
pub fn trace_leak(qm: &QuantizedModel, registry: &Registry) -> Result<Vec<TraceMatch>> {
    if registry.clients.is_empty() {
        return Err(DrmError::EmptyRegistry);
    }
    let (lo, hi) = chance_band(registry.policy.bits);
    let mut out = registry
        .clients
        .iter()
        .map(|c| {
            let r = c.extract(qm, &registry.policy)?;
            Ok(TraceMatch {
                client: c.id.clone(),
                c_ber: r.c_ber,
                in_chance_band: (lo..=hi).contains(&r.c_ber),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.c_ber.total_cmp(&a.c_ber).then_with(|| a.client.cmp(&b.client)));
    Ok(out)
}
