//! `LICE` encrypted container addressed to one client key.
//!
//! ```text
//! magic "LICE" | u16 version | key_id[32] | eph_pub[32]
//! | wrap_nonce[12] | wrapped_key[48] | nonce[12] | u64 ct_len | ciphertext+tag
//! ```
//! A random content key encrypts the `LICM` container with AES-256-GCM, the
//! whole header being the associated data. The content key itself is wrapped
//! with AES-256-GCM under `HKDF-SHA256(X25519(eph, client))`.

use std::collections::HashMap;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use lic_core::engine::IntModel;
use lic_core::format::{ByteReader, ByteWriter};
use lic_core::quantizer::QuantizedModel;
use lic_core::watermark::ProviderKey;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use x25519_dalek::{EphemeralSecret, PublicKey};

use crate::container::{Metadata, ModelContainer};
use crate::error::{DrmError, Result};
use crate::keys::{ClientIdentity, ClientPublic};
use crate::registry::{ClientRecord, WatermarkPolicy};

pub const MAGIC: &[u8; 4] = b"LICE";
pub const VERSION: u16 = 1;
const KEK_INFO: &[u8] = b"lic-drm kek v1";
const TAG_LEN: usize = 16;
const HEADER_LEN: usize = 4 + 2 + 32 + 32 + 12 + 48 + 12 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedContainer {
    pub key_id: [u8; 32],
    pub ephemeral: [u8; 32],
    pub wrap_nonce: [u8; 12],
    pub wrapped_key: [u8; 48],
    pub nonce: [u8; 12],
    /// AES-GCM output, tag last.
    pub ciphertext: Vec<u8>,
}

impl EncryptedContainer {
    fn header(&self, ct_len: usize) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC).u16(VERSION).bytes(&self.key_id).bytes(&self.ephemeral);
        w.bytes(&self.wrap_nonce).bytes(&self.wrapped_key).bytes(&self.nonce);
        w.u64(ct_len as u64);
        w.finish()
    }

    /// Associated data for the key wrap.
    fn wrap_aad(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(70);
        v.extend_from_slice(MAGIC);
        v.extend_from_slice(&VERSION.to_le_bytes());
        v.extend_from_slice(&self.key_id);
        v.extend_from_slice(&self.ephemeral);
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header(self.ciphertext.len());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("encrypted container", bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let mut arr = |n: usize| r.take(n).map(<[u8]>::to_vec);
        let key_id = arr(32)?.try_into().expect("32");
        let ephemeral = arr(32)?.try_into().expect("32");
        let wrap_nonce = arr(12)?.try_into().expect("12");
        let wrapped_key = arr(48)?.try_into().expect("48");
        let nonce = arr(12)?.try_into().expect("12");
        let len = r.u64()?;
        if len < TAG_LEN as u64 || len != r.remaining() as u64 {
            return Err(DrmError::Authentication);
        }
        let ciphertext = r.take(len as usize)?.to_vec();
        Ok(EncryptedContainer {
            key_id,
            ephemeral,
            wrap_nonce,
            wrapped_key,
            nonce,
            ciphertext,
        })
    }

    pub fn tag(&self) -> &[u8] {
        &self.ciphertext[self.ciphertext.len() - TAG_LEN..]
    }

    pub fn header_len() -> usize {
        HEADER_LEN
    }
}

fn kek(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> Aes256Gcm {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let mut okm = [0u8; 32];
    Hkdf::<Sha256>::new(Some(&salt), shared)
        .expand(KEK_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF length");
    Aes256Gcm::new(&okm.into())
}

/// Encrypts a plaintext container for `recipient`.
pub fn seal<R: RngCore + CryptoRng>(
    container: &ModelContainer,
    recipient: &ClientPublic,
    rng: &mut R,
) -> Result<EncryptedContainer> {
    let eph = EphemeralSecret::random_from_rng(&mut *rng);
    let eph_pub = PublicKey::from(&eph);
    let shared = eph.diffie_hellman(&recipient.key);
    if !shared.was_contributory() {
        return Err(DrmError::KeyFile("recipient public key is a low-order point".into()));
    }
    let mut content_key = [0u8; 32];
    let mut wrap_nonce = [0u8; 12];
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut content_key);
    rng.fill_bytes(&mut wrap_nonce);
    rng.fill_bytes(&mut nonce);
    let mut out = EncryptedContainer {
        key_id: recipient.key_id(),
        ephemeral: eph_pub.to_bytes(),
        wrap_nonce,
        wrapped_key: [0; 48],
        nonce,
        ciphertext: Vec::new(),
    };
    let wrapped = kek(shared.as_bytes(), &out.ephemeral, &recipient.bytes())
        .encrypt(
            Nonce::from_slice(&wrap_nonce),
            Payload {
                msg: &content_key,
                aad: &out.wrap_aad(),
            },
        )
        .map_err(|_| DrmError::Authentication)?;
    out.wrapped_key.copy_from_slice(&wrapped);
    let plain = container.to_bytes();
    let aad = out.header(plain.len() + TAG_LEN);
    out.ciphertext = Aes256Gcm::new(&content_key.into())
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plain, aad: &aad })
        .map_err(|_| DrmError::Authentication)?;
    Ok(out)
}

/// Refuses to package unless the client's watermark reads back exactly.
pub fn check_watermark(
    qm: &QuantizedModel,
    record: &ClientRecord,
    policy: &WatermarkPolicy,
) -> Result<lic_core::watermark::ExtractionReport> {
    let report = record.extract(qm, policy)?;
    if !report.is_exact() {
        return Err(DrmError::WatermarkMismatch {
            client: record.id.clone(),
            c_ber: report.c_ber,
        });
    }
    Ok(report)
}

/// Checks the watermark, builds the `LICM` container and seals it.
pub fn package<R: RngCore + CryptoRng>(
    qm: &QuantizedModel,
    client: &ClientPublic,
    provider: &ProviderKey,
    policy: &WatermarkPolicy,
    rng: &mut R,
) -> Result<EncryptedContainer> {
    let record = ClientRecord::new(client, provider);
    check_watermark(qm, &record, policy)?;
    let metadata = Metadata {
        client_id: hex::encode(client.key_id()),
        model_hash: hex::encode(qm.hash()),
        lambda: qm.config.lambda,
        target_layer: policy.target_layer,
        bits: policy.bits,
    };
    seal(&ModelContainer::new(metadata, qm), client, rng)
}

/// Decrypts containers for one identity, optionally caching content keys by
/// ephemeral public key. Caching is off by default.
pub struct Unlocker<'a> {
    identity: &'a ClientIdentity,
    cache: Option<HashMap<[u8; 32], [u8; 32]>>,
}

impl<'a> Unlocker<'a> {
    pub fn new(identity: &'a ClientIdentity) -> Self {
        Unlocker { identity, cache: None }
    }

    pub fn with_cache(identity: &'a ClientIdentity) -> Self {
        Unlocker {
            identity,
            cache: Some(HashMap::new()),
        }
    }

    fn content_key(&mut self, c: &EncryptedContainer) -> Result<[u8; 32]> {
        if let Some(k) = self.cache.as_ref().and_then(|m| m.get(&c.ephemeral)) {
            return Ok(*k);
        }
        let public = self.identity.public();
        let shared = self.identity.agree(&PublicKey::from(c.ephemeral));
        if !shared.was_contributory() {
            return Err(DrmError::Authentication);
        }
        let key = kek(shared.as_bytes(), &c.ephemeral, &public.bytes())
            .decrypt(
                Nonce::from_slice(&c.wrap_nonce),
                Payload {
                    msg: &c.wrapped_key,
                    aad: &c.wrap_aad(),
                },
            )
            .map_err(|_| DrmError::Authentication)?;
        let key: [u8; 32] = key.try_into().map_err(|_| DrmError::Authentication)?;
        if let Some(m) = self.cache.as_mut() {
            m.insert(c.ephemeral, key);
        }
        Ok(key)
    }

    /// Authenticates and decrypts in memory.
    pub fn unlock(&mut self, c: &EncryptedContainer) -> Result<ModelContainer> {
        let mine = self.identity.public().key_id();
        if c.key_id != mine {
            return Err(DrmError::WrongRecipient {
                expected: hex::encode(c.key_id),
                found: hex::encode(mine),
            });
        }
        let key = self.content_key(c)?;
        let aad = c.header(c.ciphertext.len());
        let plain = Aes256Gcm::new(&key.into())
            .decrypt(
                Nonce::from_slice(&c.nonce),
                Payload {
                    msg: &c.ciphertext,
                    aad: &aad,
                },
            )
            .map_err(|_| DrmError::Authentication)?;
        let container = ModelContainer::from_bytes(&plain)?;
        if container.metadata.client_id != hex::encode(mine) {
            return Err(DrmError::Metadata("container metadata names another client".into()));
        }
        Ok(container)
    }

    pub fn unlock_and_load(&mut self, c: &EncryptedContainer) -> Result<(Metadata, IntModel)> {
        let container = self.unlock(c)?;
        let model = IntModel::load(container.model()?)?;
        Ok((container.metadata, model))
    }
}

pub fn unlock(c: &EncryptedContainer, identity: &ClientIdentity) -> Result<ModelContainer> {
    Unlocker::new(identity).unlock(c)
}

pub fn unlock_and_load(c: &EncryptedContainer, identity: &ClientIdentity) -> Result<(Metadata, IntModel)> {
    Unlocker::new(identity).unlock_and_load(c)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    fn sample() -> (ClientIdentity, EncryptedContainer, ModelContainer) {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let id = ClientIdentity::generate("c1", &mut rng);
        let plain = ModelContainer {
            metadata: Metadata {
                client_id: hex::encode(id.public().key_id()),
                model_hash: "00".repeat(32),
                lambda: 0.01,
                target_layer: 3,
                bits: 64,
            },
            payload: (0..200u8).collect(),
        };
        let sealed = seal(&plain, &id.public(), &mut rng).unwrap();
        (id, sealed, plain)
    }

    #[test]
    fn seal_unlock_round_trip() {
        let (id, sealed, plain) = sample();
        let bytes = sealed.to_bytes();
        assert_eq!(&bytes[..4], b"LICE");
        assert_eq!(bytes.len(), HEADER_LEN + plain.to_bytes().len() + TAG_LEN);
        let parsed = EncryptedContainer::from_bytes(&bytes).unwrap();
        assert_eq!(unlock(&parsed, &id).unwrap(), plain);
        let mut cached = Unlocker::with_cache(&id);
        assert_eq!(cached.unlock(&parsed).unwrap(), plain);
        assert_eq!(cached.unlock(&parsed).unwrap(), plain);
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let (id, sealed, _) = sample();
        let bytes = sealed.to_bytes();
        for i in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[i / 8] ^= 1 << (i % 8);
            let r = EncryptedContainer::from_bytes(&b).and_then(|c| unlock(&c, &id));
            assert!(r.is_err(), "flip of bit {i} went unnoticed");
        }
    }

    #[test]
    fn other_client_cannot_unlock() {
        let (_, sealed, _) = sample();
        let other = ClientIdentity::generate("c2", &mut ChaCha20Rng::seed_from_u64(8));
        assert!(matches!(unlock(&sealed, &other), Err(DrmError::WrongRecipient { .. })));
        // Even with the key id forged, the key wrap does not open.
        let mut forged = sealed.clone();
        forged.key_id = other.public().key_id();
        assert!(matches!(unlock(&forged, &other), Err(DrmError::Authentication)));
    }
}
