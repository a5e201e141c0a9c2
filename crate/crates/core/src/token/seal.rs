//! Two-layer sealing of a token to the customer bank.
//!
//! The token id is first encrypted under the bank's 256-bit symmetric key
//! (AES-256-GCM). The canonical token, with that ciphertext in the id slot,
//! is then sealed to the bank's X25519 public key: an ephemeral key agreement,
//! HKDF-SHA256, and AES-256-GCM. Both layers are authenticated.
//!
//! ```text
//! envelope = ephemeral_pk[32] || nonce[12] || AES-GCM(outer_key, inner_token)[350 + 16]
//! inner id = nonce[12] || AES-GCM(symmetric_key, token_id)[32 + 16]
//! ```

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use x25519_dalek::StaticSecret;

use super::wire::{decode_with_id, encode_with_id};
use super::{KeyMaterial, Token, TokenError, TokenId, CANONICAL_LEN};
use crate::digest::{hex_bytes, Digest};

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const INNER_AAD: &[u8] = b"tset/token-id/v1";
const OUTER_INFO: &[u8] = b"tset/token-envelope/v1";

/// Encrypted token id: nonce, ciphertext, tag.
pub const INNER_ID_LEN: usize = NONCE_LEN + 32 + TAG_LEN;
/// Total sealed envelope length.
pub const ENVELOPE_LEN: usize = 32 + NONCE_LEN + (CANONICAL_LEN - 32 + INNER_ID_LEN) + TAG_LEN;
/// Offset of the first ciphertext byte, which covers the amount field.
pub const AMOUNT_OFFSET: usize = 32 + NONCE_LEN;

/// A token sealed to the customer bank. Opaque to everyone else.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SealedToken {
    #[serde(with = "hex_bytes")]
    pub envelope: Vec<u8>,
}

impl SealedToken {
    pub fn from_bytes(envelope: Vec<u8>) -> Self {
        SealedToken { envelope }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.envelope
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.envelope)
    }

    /// Length and layout check that needs no keys.
    pub fn is_well_formed(&self) -> bool {
        self.envelope.len() == ENVELOPE_LEN
    }
}

fn outer_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(OUTER_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

pub fn seal_token<R: RngCore + CryptoRng>(
    token: &Token,
    keys: &KeyMaterial,
    rng: &mut R,
) -> Result<SealedToken, TokenError> {
    let symmetric = keys.symmetric_key().ok_or(TokenError::MissingSymmetricKey)?;

    let mut inner_nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut inner_nonce);
    let inner_cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&symmetric.0));
    let inner_ct = inner_cipher
        .encrypt(
            Nonce::from_slice(&inner_nonce),
            Payload {
                msg: &token.token_id.0,
                aad: INNER_AAD,
            },
        )
        .expect("AES-GCM encryption of 32 bytes cannot fail");
    let mut inner_id = Vec::with_capacity(INNER_ID_LEN);
    inner_id.extend_from_slice(&inner_nonce);
    inner_id.extend_from_slice(&inner_ct);
    let plaintext = encode_with_id(token, &inner_id);

    let recipient = keys.public_key().encryption;
    let mut eph_bytes = [0u8; 32];
    rng.fill_bytes(&mut eph_bytes);
    let ephemeral = StaticSecret::from(eph_bytes);
    let ephemeral_pk = x25519_dalek::PublicKey::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&x25519_dalek::PublicKey::from(recipient));
    let key = outer_key(shared.as_bytes(), &ephemeral_pk, &recipient);

    let mut outer_nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut outer_nonce);
    let outer_cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&key));
    let ct = outer_cipher
        .encrypt(
            Nonce::from_slice(&outer_nonce),
            Payload {
                msg: &plaintext,
                aad: &ephemeral_pk,
            },
        )
        .expect("AES-GCM encryption cannot fail for in-range lengths");

    let mut envelope = Vec::with_capacity(ENVELOPE_LEN);
    envelope.extend_from_slice(&ephemeral_pk);
    envelope.extend_from_slice(&outer_nonce);
    envelope.extend_from_slice(&ct);
    Ok(SealedToken { envelope })
}

pub fn open_token(sealed: &SealedToken, keys: &KeyMaterial) -> Result<Token, TokenError> {
    let symmetric = keys.symmetric_key().ok_or(TokenError::MissingSymmetricKey)?;
    let env = &sealed.envelope;
    if env.len() < 32 + NONCE_LEN + TAG_LEN {
        return Err(TokenError::DecryptionFailure);
    }
    let ephemeral_pk: [u8; 32] = env[..32].try_into().unwrap();
    let outer_nonce = &env[32..32 + NONCE_LEN];
    let ct = &env[32 + NONCE_LEN..];

    let shared = keys
        .encryption_secret()
        .diffie_hellman(&x25519_dalek::PublicKey::from(ephemeral_pk));
    if !shared.was_contributory() {
        return Err(TokenError::DecryptionFailure);
    }
    let key = outer_key(shared.as_bytes(), &ephemeral_pk, &keys.public_key().encryption);
    let outer_cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&key));
    let plaintext = outer_cipher
        .decrypt(
            Nonce::from_slice(outer_nonce),
            Payload {
                msg: ct,
                aad: &ephemeral_pk,
            },
        )
        .map_err(|_| TokenError::DecryptionFailure)?;

    let (token, inner_id) = decode_with_id(&plaintext, INNER_ID_LEN)?;
    let inner_cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&symmetric.0));
    let id = inner_cipher
        .decrypt(
            Nonce::from_slice(&inner_id[..NONCE_LEN]),
            Payload {
                msg: &inner_id[NONCE_LEN..],
                aad: INNER_AAD,
            },
        )
        .map_err(|_| TokenError::TokenIdDecryptionFailure)?;
    let id: [u8; 32] = id
        .try_into()
        .map_err(|_| TokenError::TokenIdDecryptionFailure)?;
    Ok(Token {
        token_id: TokenId(id),
        ..token
    })
}
