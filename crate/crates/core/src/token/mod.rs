//! The escrowed payment token.
//!
//! A token carries the amount to pay, the customer's and merchant's
//! certificates, a single-use 256-bit identifier and the issue time. The
//! customer bank generates it, keeps a duplicate in its [`TokenVault`], and
//! seals it so that only the bank can open it again. At settlement the opened
//! token is compared field by field with the stored duplicate.

mod keys;
mod seal;
mod vault;
mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use keys::{Authority, Certificate, KeyMaterial, PublicKey, RootKey, SymmetricKey, CERTIFICATE_LEN};
pub use seal::{open_token, seal_token, SealedToken, AMOUNT_OFFSET, ENVELOPE_LEN, INNER_ID_LEN};
pub use vault::{generate_token, TokenStatus, TokenVault, VaultRecord};
pub use wire::{canonical_deserialize, canonical_serialize, CANONICAL_LEN};

use crate::digest::hex_array;

/// Money in minor currency units.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Amount(pub u64);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn units(self) -> u64 {
        self.0
    }

    pub fn checked_add(self, other: Amount) -> Option<Amount> {
        self.0.checked_add(other.0).map(Amount)
    }

    pub fn checked_sub(self, other: Amount) -> Option<Amount> {
        self.0.checked_sub(other.0).map(Amount)
    }

    pub fn checked_mul(self, factor: u64) -> Option<Amount> {
        self.0.checked_mul(factor).map(Amount)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::iter::Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(iter: I) -> Amount {
        Amount(iter.map(|a| a.0).sum())
    }
}

/// 256-bit single-use token identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(#[serde(with = "hex_array")] pub [u8; 32]);

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenId({})", hex::encode(&self.0[..8]))
    }
}

/// Milliseconds on the simulation clock.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub amount: Amount,
    pub cert_customer: Certificate,
    pub cert_merchant: Certificate,
    pub token_id: TokenId,
    pub timestamp: Timestamp,
}

/// Names of the five token fields, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenField {
    Amount,
    CertCustomer,
    CertMerchant,
    TokenId,
    Timestamp,
}

impl TokenField {
    pub const ALL: [TokenField; 5] = [
        TokenField::Amount,
        TokenField::CertCustomer,
        TokenField::CertMerchant,
        TokenField::TokenId,
        TokenField::Timestamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenField::Amount => "amount",
            TokenField::CertCustomer => "cert_customer",
            TokenField::CertMerchant => "cert_merchant",
            TokenField::TokenId => "token_id",
            TokenField::Timestamp => "timestamp",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<TokenField> {
        TokenField::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Match,
    Tampered,
}

/// Result of comparing an opened token with the bank's duplicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    mismatched_fields: Vec<TokenField>,
}

impl VerifyOutcome {
    pub fn verdict(&self) -> Verdict {
        if self.mismatched_fields.is_empty() {
            Verdict::Match
        } else {
            Verdict::Tampered
        }
    }

    pub fn mismatched_fields(&self) -> &[TokenField] {
        &self.mismatched_fields
    }

    pub fn is_match(&self) -> bool {
        self.mismatched_fields.is_empty()
    }
}

/// Field-wise comparison of an opened token against the stored duplicate.
pub fn verify_token(opened: &Token, stored: &Token) -> VerifyOutcome {
    let mut mismatched_fields = Vec::new();
    if opened.amount != stored.amount {
        mismatched_fields.push(TokenField::Amount);
    }
    if opened.cert_customer != stored.cert_customer {
        mismatched_fields.push(TokenField::CertCustomer);
    }
    if opened.cert_merchant != stored.cert_merchant {
        mismatched_fields.push(TokenField::CertMerchant);
    }
    if opened.token_id != stored.token_id {
        mismatched_fields.push(TokenField::TokenId);
    }
    if opened.timestamp != stored.timestamp {
        mismatched_fields.push(TokenField::Timestamp);
    }
    VerifyOutcome { mismatched_fields }
}

/// Why a presented token was refused at settlement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperCause {
    /// Opened cleanly but differs from the stored duplicate.
    Tampered { fields: Vec<TokenField> },
    /// Outer envelope failed authenticated decryption.
    Undecryptable,
    /// Inner token-id layer failed authenticated decryption.
    TokenIdUndecryptable,
    /// Decrypted, but no duplicate exists for the id.
    UnknownTokenId,
    /// The id was already paid out; a replay.
    AlreadySettled,
    /// The id was invalidated after an earlier tamper report or cancellation.
    Revoked,
    /// The id belongs to a different transaction.
    WrongTransaction,
    /// The envelope failed the keyless structural check.
    Malformed,
}

impl TamperCause {
    /// Replays of an already-paid token do not warrant a new token.
    pub fn is_replay(&self) -> bool {
        matches!(self, TamperCause::AlreadySettled | TamperCause::Revoked)
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            TamperCause::Tampered { .. } => 0,
            TamperCause::Undecryptable => 1,
            TamperCause::TokenIdUndecryptable => 2,
            TamperCause::UnknownTokenId => 3,
            TamperCause::AlreadySettled => 4,
            TamperCause::Revoked => 5,
            TamperCause::WrongTransaction => 6,
            TamperCause::Malformed => 7,
        }
    }

    pub(crate) fn from_code(code: u8, fields: Vec<TokenField>) -> Option<TamperCause> {
        Some(match code {
            0 => TamperCause::Tampered { fields },
            1 => TamperCause::Undecryptable,
            2 => TamperCause::TokenIdUndecryptable,
            3 => TamperCause::UnknownTokenId,
            4 => TamperCause::AlreadySettled,
            5 => TamperCause::Revoked,
            6 => TamperCause::WrongTransaction,
            7 => TamperCause::Malformed,
            _ => return None,
        })
    }
}

impl fmt::Display for TamperCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TamperCause::Tampered { fields } => {
                let names: Vec<_> = fields.iter().map(|f| f.name()).collect();
                write!(f, "tampered[{}]", names.join(","))
            }
            TamperCause::Undecryptable => f.write_str("undecryptable"),
            TamperCause::TokenIdUndecryptable => f.write_str("token-id-undecryptable"),
            TamperCause::UnknownTokenId => f.write_str("unknown-token-id"),
            TamperCause::AlreadySettled => f.write_str("already-settled"),
            TamperCause::Revoked => f.write_str("revoked"),
            TamperCause::WrongTransaction => f.write_str("wrong-transaction"),
            TamperCause::Malformed => f.write_str("malformed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("token amount must be positive")]
    NonPositiveAmount,
    #[error("{0} certificate failed verification")]
    CertificateRejected(&'static str),
    #[error("sealed token could not be decrypted")]
    DecryptionFailure,
    #[error("token id layer could not be decrypted")]
    TokenIdDecryptionFailure,
    #[error("malformed token bytes: {0}")]
    MalformedBytes(String),
    #[error("key material lacks the symmetric key")]
    MissingSymmetricKey,
    #[error("no stored duplicate for this token id")]
    UnknownTokenId,
    #[error("token id already settled")]
    AlreadySettled,
    #[error("token id has been revoked")]
    Revoked,
}
