//! Entity key material and the certificates binding keys to identities.

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use x25519_dalek::StaticSecret;

use crate::digest::{hex_array, hex_bytes};
use crate::ids::EntityId;

/// Encoded certificate length: subject (5) + two public keys (64) + signature (64).
pub const CERTIFICATE_LEN: usize = 133;

const CERT_DOMAIN: &[u8] = b"tset/certificate/v1";

/// The public half of an entity's keys: an Ed25519 verifying key for
/// signatures and an X25519 key for sealing to the entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    #[serde(with = "hex_array")]
    pub verifying: [u8; 32],
    #[serde(with = "hex_array")]
    pub encryption: [u8; 32],
}

impl PublicKey {
    /// Checks `signature` over `message` against the verifying half.
    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&self.verifying) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
            return false;
        };
        key.verify(message, &sig).is_ok()
    }
}

/// 256-bit symmetric key used for the token-ID layer.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(pub(crate) [u8; 32]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        SymmetricKey(bytes)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// Secret and public keys held by one entity. Only the customer bank carries
/// a symmetric key.
#[derive(Clone)]
pub struct KeyMaterial {
    signing: SigningKey,
    encryption: StaticSecret,
    symmetric: Option<SymmetricKey>,
}

impl KeyMaterial {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, with_symmetric: bool) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let signing = SigningKey::from_bytes(&seed);
        rng.fill_bytes(&mut seed);
        let encryption = StaticSecret::from(seed);
        let symmetric = with_symmetric.then(|| SymmetricKey::generate(rng));
        KeyMaterial {
            signing,
            encryption,
            symmetric,
        }
    }

    /// Builds key material from raw secrets; used by golden tests.
    pub fn from_secrets(
        signing: [u8; 32],
        encryption: [u8; 32],
        symmetric: Option<[u8; 32]>,
    ) -> Self {
        KeyMaterial {
            signing: SigningKey::from_bytes(&signing),
            encryption: StaticSecret::from(encryption),
            symmetric: symmetric.map(SymmetricKey),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey {
            verifying: self.signing.verifying_key().to_bytes(),
            encryption: x25519_dalek::PublicKey::from(&self.encryption).to_bytes(),
        }
    }

    pub fn symmetric_key(&self) -> Option<&SymmetricKey> {
        self.symmetric.as_ref()
    }

    pub(crate) fn encryption_secret(&self) -> &StaticSecret {
        &self.encryption
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing.sign(message).to_bytes().to_vec()
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("public", &self.public_key())
            .field("symmetric", &self.symmetric.is_some())
            .finish()
    }
}

/// The single built-in root that signs every certificate.
#[derive(Clone)]
pub struct Authority {
    signing: SigningKey,
}

/// Verifying key of the [`Authority`], distributed to every entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootKey(#[serde(with = "hex_array")] pub [u8; 32]);

impl Authority {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Authority {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_secret(seed: [u8; 32]) -> Self {
        Authority {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn root_key(&self) -> RootKey {
        RootKey(self.signing.verifying_key().to_bytes())
    }

    pub fn issue(&self, subject: EntityId, public_key: PublicKey) -> Certificate {
        let body = Certificate::signed_body(subject, &public_key);
        Certificate {
            subject,
            public_key,
            issuer_signature: self.signing.sign(&body).to_bytes().to_vec(),
        }
    }
}

impl fmt::Debug for Authority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Authority").field(&self.root_key()).finish()
    }
}

/// An identity record: subject, its public keys, and the root's signature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Certificate {
    pub subject: EntityId,
    pub public_key: PublicKey,
    #[serde(with = "hex_bytes")]
    pub issuer_signature: Vec<u8>,
}

impl Certificate {
    fn signed_body(subject: EntityId, key: &PublicKey) -> Vec<u8> {
        let mut body = Vec::with_capacity(CERT_DOMAIN.len() + 69);
        body.extend_from_slice(CERT_DOMAIN);
        body.extend_from_slice(&subject.to_bytes());
        body.extend_from_slice(&key.verifying);
        body.extend_from_slice(&key.encryption);
        body
    }

    pub fn verify(&self, root: &RootKey) -> bool {
        let Ok(root) = VerifyingKey::from_bytes(&root.0) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(&self.issuer_signature) else {
            return false;
        };
        root.verify(&Self::signed_body(self.subject, &self.public_key), &sig)
            .is_ok()
    }

    /// Fixed-width encoding used inside the token wire format.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CERTIFICATE_LEN);
        out.extend_from_slice(&self.subject.to_bytes());
        out.extend_from_slice(&self.public_key.verifying);
        out.extend_from_slice(&self.public_key.encryption);
        out.extend_from_slice(&self.issuer_signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Certificate> {
        if bytes.len() != CERTIFICATE_LEN {
            return None;
        }
        let subject = EntityId::from_bytes(&bytes[..5])?;
        Some(Certificate {
            subject,
            public_key: PublicKey {
                verifying: bytes[5..37].try_into().ok()?,
                encryption: bytes[37..69].try_into().ok()?,
            },
            issuer_signature: bytes[69..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn issued_certificates_verify_and_modified_ones_do_not() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let root = Authority::generate(&mut rng);
        let keys = KeyMaterial::generate(&mut rng, false);
        let cert = root.issue(EntityId::merchant(1), keys.public_key());
        assert!(cert.verify(&root.root_key()));

        let mut other_subject = cert.clone();
        other_subject.subject = EntityId::merchant(2);
        assert!(!other_subject.verify(&root.root_key()));

        let mut other_key = cert.clone();
        other_key.public_key.encryption[0] ^= 1;
        assert!(!other_key.verify(&root.root_key()));

        let imposter = Authority::generate(&mut rng);
        assert!(!cert.verify(&imposter.root_key()));
    }

    #[test]
    fn certificate_encoding_is_fixed_width_and_reversible() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let root = Authority::generate(&mut rng);
        let keys = KeyMaterial::generate(&mut rng, true);
        let cert = root.issue(EntityId::customer(9), keys.public_key());
        let bytes = cert.encode();
        assert_eq!(bytes.len(), CERTIFICATE_LEN);
        assert_eq!(Certificate::decode(&bytes), Some(cert));
        assert_eq!(Certificate::decode(&bytes[1..]), None);
    }

    #[test]
    fn signatures_bind_to_the_signing_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = KeyMaterial::generate(&mut rng, false);
        let b = KeyMaterial::generate(&mut rng, false);
        let sig = a.sign(b"hello");
        assert!(a.public_key().verify(b"hello", &sig));
        assert!(!a.public_key().verify(b"hellp", &sig));
        assert!(!b.public_key().verify(b"hello", &sig));
        assert!(!a.public_key().verify(b"hello", &sig[..63]));
    }
}
