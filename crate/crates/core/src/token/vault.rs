//! The customer bank's issued-id set and duplicate-token store.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};

use super::{Amount, Certificate, RootKey, Timestamp, Token, TokenError, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    Active,
    Settled,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaultRecord {
    pub token: Token,
    pub status: TokenStatus,
}

/// Every token a bank has issued, keyed by id. Records are never removed, so
/// the key set doubles as the issued-id set.
#[derive(Debug, Clone, Default)]
pub struct TokenVault {
    records: BTreeMap<TokenId, VaultRecord>,
    /// Certificates already checked against a root, as (root, encoding).
    verified: BTreeSet<([u8; 32], Vec<u8>)>,
}

impl TokenVault {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &TokenId) -> bool {
        self.records.contains_key(id)
    }

    /// The retained duplicate for `id`.
    pub fn lookup(&self, id: &TokenId) -> Result<&VaultRecord, TokenError> {
        self.records.get(id).ok_or(TokenError::UnknownTokenId)
    }

    pub fn generate_token<R: RngCore + CryptoRng>(
        &mut self,
        amount: Amount,
        cert_customer: &Certificate,
        cert_merchant: &Certificate,
        root: &RootKey,
        now: Timestamp,
        ids: &mut R,
    ) -> Result<Token, TokenError> {
        if amount.0 == 0 {
            return Err(TokenError::NonPositiveAmount);
        }
        if !self.check_certificate(cert_customer, root) {
            return Err(TokenError::CertificateRejected("customer"));
        }
        if !self.check_certificate(cert_merchant, root) {
            return Err(TokenError::CertificateRejected("merchant"));
        }
        let token_id = loop {
            let mut raw = [0u8; 32];
            ids.fill_bytes(&mut raw);
            let candidate = TokenId(raw);
            if !self.records.contains_key(&candidate) {
                break candidate;
            }
        };
        let token = Token {
            amount,
            cert_customer: cert_customer.clone(),
            cert_merchant: cert_merchant.clone(),
            token_id,
            timestamp: now,
        };
        self.records.insert(
            token_id,
            VaultRecord {
                token: token.clone(),
                status: TokenStatus::Active,
            },
        );
        Ok(token)
    }

    fn check_certificate(&mut self, cert: &Certificate, root: &RootKey) -> bool {
        let key = (root.0, cert.encode());
        if self.verified.contains(&key) {
            return true;
        }
        let ok = cert.verify(root);
        if ok {
            self.verified.insert(key);
        }
        ok
    }

    /// Marks an active token settled. Settling twice is refused.
    pub fn mark_settled(&mut self, id: &TokenId) -> Result<(), TokenError> {
        let record = self.records.get_mut(id).ok_or(TokenError::UnknownTokenId)?;
        match record.status {
            TokenStatus::Active => {
                record.status = TokenStatus::Settled;
                Ok(())
            }
            TokenStatus::Settled => Err(TokenError::AlreadySettled),
            TokenStatus::Revoked => Err(TokenError::Revoked),
        }
    }

    /// Permanently invalidates an unsettled token. Returns whether it was
    /// active before the call.
    pub fn revoke(&mut self, id: &TokenId) -> Result<bool, TokenError> {
        let record = self.records.get_mut(id).ok_or(TokenError::UnknownTokenId)?;
        match record.status {
            TokenStatus::Active => {
                record.status = TokenStatus::Revoked;
                Ok(true)
            }
            TokenStatus::Revoked => Ok(false),
            TokenStatus::Settled => Err(TokenError::AlreadySettled),
        }
    }
}

/// Free-function form of [`TokenVault::generate_token`].
pub fn generate_token<R: RngCore + CryptoRng>(
    vault: &mut TokenVault,
    amount: Amount,
    cert_customer: &Certificate,
    cert_merchant: &Certificate,
    root: &RootKey,
    now: Timestamp,
    ids: &mut R,
) -> Result<Token, TokenError> {
    vault.generate_token(amount, cert_customer, cert_merchant, root, now, ids)
}
