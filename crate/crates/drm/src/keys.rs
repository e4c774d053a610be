//! Client key pairs and their PEM-like text files.
//!
//! ```text
//! -----BEGIN LIC PUBLIC KEY-----
//! Client: <id>
//! <base64 of the 32-byte X25519 public key>
//! -----END LIC PUBLIC KEY-----
//! ```
//! Private keys use `LIC PRIVATE KEY`, or `LIC ENCRYPTED PRIVATE KEY` when a
//! passphrase is given: base64 of `salt[16] | nonce[12] | AES-256-GCM(secret)`
//! under a PBKDF2-HMAC-SHA256 key.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, SharedSecret, StaticSecret};

use crate::error::{DrmError, Result};

/// Environment variable holding the private-key passphrase.
pub const PASSPHRASE_ENV: &str = "LIC_KEY_PASSPHRASE";
pub const PBKDF2_ROUNDS: u32 = 100_000;

const PUBLIC_LABEL: &str = "LIC PUBLIC KEY";
const PRIVATE_LABEL: &str = "LIC PRIVATE KEY";
const ENCRYPTED_LABEL: &str = "LIC ENCRYPTED PRIVATE KEY";

fn key_err(detail: impl Into<String>) -> DrmError {
    DrmError::KeyFile(detail.into())
}

fn armor(label: &str, id: &str, body: &[u8]) -> String {
    format!("-----BEGIN {label}-----\nClient: {id}\n{}\n-----END {label}-----\n", B64.encode(body))
}

fn unarmor(text: &str) -> Result<(String, String, Vec<u8>)> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next().ok_or_else(|| key_err("empty key file"))?;
    let label = first
        .strip_prefix("-----BEGIN ")
        .and_then(|s| s.strip_suffix("-----"))
        .ok_or_else(|| key_err("missing BEGIN line"))?
        .to_string();
    let id = lines
        .next()
        .and_then(|l| l.strip_prefix("Client: "))
        .ok_or_else(|| key_err("missing Client header"))?
        .to_string();
    let mut body = String::new();
    let end = format!("-----END {label}-----");
    let mut closed = false;
    for l in lines.by_ref() {
        if l == end {
            closed = true;
            break;
        }
        body.push_str(l);
    }
    if !closed || lines.next().is_some() {
        return Err(key_err(format!("missing or misplaced END line for {label}")));
    }
    let bytes = B64.decode(body).map_err(|e| key_err(format!("base64: {e}")))?;
    Ok((label, id, bytes))
}

fn bytes32(b: &[u8], what: &str) -> Result<[u8; 32]> {
    b.try_into().map_err(|_| key_err(format!("{what} must be 32 bytes, got {}", b.len())))
}

/// A registered client's public half.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientPublic {
    pub id: String,
    pub key: PublicKey,
}

impl ClientPublic {
    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        Ok(ClientPublic {
            id: id.into(),
            key: PublicKey::from(bytes32(bytes, "public key")?),
        })
    }

    pub fn bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    /// SHA-256 of the public key bytes.
    pub fn key_id(&self) -> [u8; 32] {
        Sha256::digest(self.key.as_bytes()).into()
    }

    pub fn to_pem(&self) -> String {
        armor(PUBLIC_LABEL, &self.id, self.key.as_bytes())
    }

    pub fn from_pem(text: &str) -> Result<Self> {
        let (label, id, bytes) = unarmor(text)?;
        if label != PUBLIC_LABEL {
            return Err(key_err(format!("expected {PUBLIC_LABEL}, found {label}")));
        }
        Self::from_bytes(id, &bytes)
    }
}

/// A client key pair. The secret is only ever written to its own key file.
#[derive(Clone)]
pub struct ClientIdentity {
    pub id: String,
    secret: StaticSecret,
}

impl std::fmt::Debug for ClientIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientIdentity").field("id", &self.id).finish_non_exhaustive()
    }
}

impl ClientIdentity {
    pub fn generate<R: RngCore + CryptoRng>(id: impl Into<String>, rng: &mut R) -> Self {
        ClientIdentity {
            id: id.into(),
            secret: StaticSecret::random_from_rng(rng),
        }
    }

    pub fn public(&self) -> ClientPublic {
        ClientPublic {
            id: self.id.clone(),
            key: PublicKey::from(&self.secret),
        }
    }

    pub(crate) fn agree(&self, peer: &PublicKey) -> SharedSecret {
        self.secret.diffie_hellman(peer)
    }

    /// Key file text; encrypted when `passphrase` is given.
    pub fn to_pem<R: RngCore + CryptoRng>(&self, passphrase: Option<&str>, rng: &mut R) -> Result<String> {
        let Some(pass) = passphrase else {
            return Ok(armor(PRIVATE_LABEL, &self.id, self.secret.as_bytes()));
        };
        let mut salt = [0u8; 16];
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        let cipher = passphrase_cipher(pass, &salt);
        let ct = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: self.secret.as_bytes(),
                    aad: self.id.as_bytes(),
                },
            )
            .map_err(|_| key_err("encryption failed"))?;
        let mut body = salt.to_vec();
        body.extend_from_slice(&nonce);
        body.extend_from_slice(&ct);
        Ok(armor(ENCRYPTED_LABEL, &self.id, &body))
    }

    pub fn from_pem(text: &str, passphrase: Option<&str>) -> Result<Self> {
        let (label, id, bytes) = unarmor(text)?;
        let secret = match label.as_str() {
            PRIVATE_LABEL => bytes32(&bytes, "private key")?,
            ENCRYPTED_LABEL => {
                let pass = passphrase
                    .ok_or_else(|| key_err(format!("key is encrypted; set {PASSPHRASE_ENV}")))?;
                if bytes.len() != 16 + 12 + 48 {
                    return Err(key_err("encrypted key body has the wrong length"));
                }
                let cipher = passphrase_cipher(pass, &bytes[..16]);
                let pt = cipher
                    .decrypt(
                        Nonce::from_slice(&bytes[16..28]),
                        Payload {
                            msg: &bytes[28..],
                            aad: id.as_bytes(),
                        },
                    )
                    .map_err(|_| key_err("wrong passphrase or corrupt key file"))?;
                bytes32(&pt, "private key")?
            }
            other => return Err(key_err(format!("expected a private key, found {other}"))),
        };
        Ok(ClientIdentity {
            id,
            secret: StaticSecret::from(secret),
        })
    }
}

fn passphrase_cipher(pass: &str, salt: &[u8]) -> Aes256Gcm {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(pass.as_bytes(), salt, PBKDF2_ROUNDS, &mut key);
    Aes256Gcm::new(&key.into())
}

/// Passphrase from [`PASSPHRASE_ENV`], if set and non-empty.
pub fn passphrase_from_env() -> Option<String> {
    std::env::var(PASSPHRASE_ENV).ok().filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    #[test]
    fn public_key_file_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let c = ClientIdentity::generate("client-01", &mut rng);
        let p = c.public();
        let text = p.to_pem();
        assert!(text.starts_with("-----BEGIN LIC PUBLIC KEY-----\nClient: client-01\n"));
        assert_eq!(ClientPublic::from_pem(&text).unwrap(), p);
        assert!(ClientPublic::from_pem(&text.replace("END LIC PUBLIC", "END LIC PRIVATE")).is_err());
        assert!(ClientPublic::from_pem("").is_err());
    }

    #[test]
    fn private_key_files_with_and_without_passphrase() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let c = ClientIdentity::generate("c", &mut rng);
        let plain = c.to_pem(None, &mut rng).unwrap();
        assert_eq!(ClientIdentity::from_pem(&plain, None).unwrap().public(), c.public());
        let enc = c.to_pem(Some("hunter2"), &mut rng).unwrap();
        assert!(enc.contains("LIC ENCRYPTED PRIVATE KEY"));
        assert_eq!(ClientIdentity::from_pem(&enc, Some("hunter2")).unwrap().public(), c.public());
        assert!(matches!(ClientIdentity::from_pem(&enc, Some("wrong")), Err(DrmError::KeyFile(_))));
        assert!(ClientIdentity::from_pem(&enc, None).is_err());
        assert!(ClientIdentity::from_pem(&c.public().to_pem(), None).is_err());
    }
}
