//! Customer bank (issuer): issues sealed tokens against a hold on the
//! customer's funds and pays out only for a token matching its duplicate.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};

use super::message::{CompletionStatus, Payload};
use super::{Ctx, Effects, Input, Phase, StepError};
use crate::ids::{AccountId, EntityId, Role, TransactionId};
use crate::token::{
    open_token, seal_token, verify_token, Amount, KeyMaterial, SealedToken, TamperCause, Timestamp,
    TokenError, TokenId, TokenStatus, TokenVault,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Account {
    pub owner: EntityId,
    pub available: Amount,
    /// Reserved for an issued, unsettled token.
    pub held: Amount,
}

impl Account {
    pub fn total(&self) -> Amount {
        Amount(self.available.0 + self.held.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CbTxn {
    pub phase: Phase,
    pub customer: EntityId,
    pub account: Option<AccountId>,
    pub merchant: Option<EntityId>,
    pub amount: Amount,
    pub attempt: u32,
    /// The token currently backed by a hold.
    pub active: Option<TokenId>,
    pub issued: Vec<TokenId>,
    pub settled: Option<Amount>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SettleOutcome {
    Paid {
        amount: Amount,
        merchant: EntityId,
        token_id: TokenId,
    },
    Refused(TamperCause),
}

#[derive(Debug, Clone)]
pub struct CustomerBankState {
    pub vault: TokenVault,
    pub accounts: BTreeMap<AccountId, Account>,
    pub txns: BTreeMap<TransactionId, CbTxn>,
    pub token_txn: BTreeMap<TokenId, TransactionId>,
    pub ttp: EntityId,
}

impl CustomerBankState {
    pub fn new(accounts: BTreeMap<AccountId, Account>, ttp: EntityId) -> Self {
        CustomerBankState {
            vault: TokenVault::new(),
            accounts,
            txns: BTreeMap::new(),
            token_txn: BTreeMap::new(),
            ttp,
        }
    }

    pub fn total_funds(&self) -> Amount {
        self.accounts.values().map(Account::total).sum()
    }

    /// Opens and checks a presented token without changing anything.
    pub fn assess(
        &self,
        keys: &KeyMaterial,
        txn: &TransactionId,
        sealed: &SealedToken,
    ) -> Result<(TokenId, Amount, EntityId), TamperCause> {
        let opened = open_token(sealed, keys).map_err(|e| match e {
            TokenError::DecryptionFailure => TamperCause::Undecryptable,
            TokenError::TokenIdDecryptionFailure => TamperCause::TokenIdUndecryptable,
            _ => TamperCause::Malformed,
        })?;
        let record = self
            .vault
            .lookup(&opened.token_id)
            .map_err(|_| TamperCause::UnknownTokenId)?;
        if self.token_txn.get(&opened.token_id) != Some(txn) {
            return Err(TamperCause::WrongTransaction);
        }
        match record.status {
            TokenStatus::Settled => return Err(TamperCause::AlreadySettled),
            TokenStatus::Revoked => return Err(TamperCause::Revoked),
            TokenStatus::Active => {}
        }
        let outcome = verify_token(&opened, &record.token);
        if !outcome.is_match() {
            return Err(TamperCause::Tampered {
                fields: outcome.mismatched_fields().to_vec(),
            });
        }
        Ok((opened.token_id, record.token.amount, record.token.cert_merchant.subject))
    }

    /// Settles or refuses a presented token. A refusal that is not a replay
    /// revokes the transaction's active token and releases its hold.
    pub fn settle(&mut self, keys: &KeyMaterial, txn: &TransactionId, sealed: &SealedToken) -> SettleOutcome {
        match self.assess(keys, txn, sealed) {
            Ok((token_id, amount, merchant)) => {
                self.vault.mark_settled(&token_id).expect("assessed active");
                let rec = self.txns.get_mut(txn).expect("active token has a transaction");
                let account = self
                    .accounts
                    .get_mut(&rec.account.expect("issued transactions name an account"))
                    .expect("account exists");
                account.held = account.held.checked_sub(amount).expect("hold covers the token");
                rec.active = None;
                rec.settled = Some(amount);
                rec.phase = Phase::Settled;
                SettleOutcome::Paid {
                    amount,
                    merchant,
                    token_id,
                }
            }
            Err(cause) => {
                if !cause.is_replay() {
                    self.revoke_active(txn);
                }
                SettleOutcome::Refused(cause)
            }
        }
    }

    /// Revokes the transaction's active token, if any, and returns its hold
    /// to the customer. Returns whether a hold was released.
    fn revoke_active(&mut self, txn: &TransactionId) -> bool {
        let Some(rec) = self.txns.get_mut(txn) else {
            return false;
        };
        let Some(id) = rec.active.take() else {
            return false;
        };
        self.vault.revoke(&id).expect("active token is revocable");
        let account = self
            .accounts
            .get_mut(&rec.account.expect("issued transactions name an account"))
            .expect("account exists");
        account.held = account.held.checked_sub(rec.amount).expect("hold covers the token");
        account.available = account.available.checked_add(rec.amount).expect("no overflow");
        if rec.phase == Phase::Issued {
            rec.phase = Phase::Revoked;
        }
        true
    }

    pub(crate) fn handle<R: RngCore + CryptoRng>(
        &mut self,
        ctx: &Ctx<'_>,
        input: &Input,
        rng: &mut R,
    ) -> Result<Effects, StepError> {
        let Input::Message(msg) = input else {
            return Err(ctx.violation("banks keep no timers"));
        };
        let txn = msg.txn;
        match &msg.payload {
            Payload::TokenRequest {
                amount,
                account,
                cert_customer,
                cert_merchant,
                attempt,
            } => {
                if msg.from.role != Role::Customer || txn.originator != msg.from {
                    return Err(ctx.violation("token request must come from the transaction's customer"));
                }
                ctx.directory.check_cert(cert_customer, msg.from, msg.from)?;
                if cert_merchant.subject.role != Role::Merchant {
                    return Err(ctx.violation("payee is not a merchant"));
                }
                ctx.directory.check_cert(cert_merchant, cert_merchant.subject, msg.from)?;
                let acct = self
                    .accounts
                    .get(account)
                    .filter(|a| a.owner == msg.from)
                    .ok_or_else(|| ctx.violation("account not held by the requester"))?;
                if amount.0 == 0 {
                    return Err(ctx.violation("zero amount"));
                }
                let existing = self.txns.get(&txn);
                if let Some(rec) = existing {
                    if rec.phase == Phase::Cancelled {
                        return Ok(Effects::to(txn, Phase::Cancelled)
                            .note("token request after cancellation ignored"));
                    }
                    if *attempt <= rec.attempt
                        || rec.amount != *amount
                        || rec.account != Some(*account)
                        || rec.merchant != Some(cert_merchant.subject)
                    {
                        return Err(ctx.violation("reissue request does not extend the transaction"));
                    }
                } else if *attempt != 0 {
                    return Err(ctx.violation("first request must be attempt 0"));
                }
                let freed = existing.and_then(|r| r.active).map_or(Amount::ZERO, |_| *amount);
                let spendable = acct.available.0 + freed.0;

                // validated; mutate from here on
                self.revoke_active(&txn);
                let rec = self.txns.entry(txn).or_insert_with(|| CbTxn {
                    phase: Phase::Start,
                    customer: msg.from,
                    account: Some(*account),
                    merchant: Some(cert_merchant.subject),
                    amount: *amount,
                    attempt: 0,
                    active: None,
                    issued: Vec::new(),
                    settled: None,
                });
                rec.attempt = *attempt;
                if spendable < amount.0 {
                    rec.phase = Phase::Declined;
                    return Ok(Effects::to(txn, Phase::Declined)
                        .note("insufficient funds")
                        .send(
                            msg.from,
                            Payload::CompletionNotice {
                                status: CompletionStatus::Declined,
                                amount: None,
                            },
                        ));
                }
                let token = self
                    .vault
                    .generate_token(
                        *amount,
                        cert_customer,
                        cert_merchant,
                        ctx.directory.root(),
                        Timestamp(ctx.now),
                        rng,
                    )
                    .expect("inputs validated");
                let sealed = seal_token(&token, ctx.keys, rng).expect("bank holds the symmetric key");
                let acct = self.accounts.get_mut(account).expect("checked above");
                acct.available = Amount(acct.available.0 - amount.0);
                acct.held = Amount(acct.held.0 + amount.0);
                rec.active = Some(token.token_id);
                rec.issued.push(token.token_id);
                rec.phase = Phase::Issued;
                self.token_txn.insert(token.token_id, txn);
                Ok(Effects::to(txn, Phase::Issued).send(msg.from, Payload::TokenIssued { sealed }))
            }
            Payload::PaymentRequest { sealed } => {
                if msg.from.role != Role::MerchantBank {
                    return Err(ctx.violation("payment request must come from a merchant bank"));
                }
                match self.settle(ctx.keys, &txn, sealed) {
                    SettleOutcome::Paid { amount, merchant, .. } => {
                        let customer = self.txns[&txn].customer;
                        Ok(Effects::to(txn, Phase::Settled)
                            .send(
                                msg.from,
                                Payload::Settlement {
                                    amount,
                                    merchant,
                                    token_digest: sealed.digest(),
                                },
                            )
                            .send(
                                customer,
                                Payload::CompletionNotice {
                                    status: CompletionStatus::Completed,
                                    amount: Some(amount),
                                },
                            ))
                    }
                    SettleOutcome::Refused(cause) => {
                        let phase = self.txns.get(&txn).map_or(Phase::Start, |r| r.phase);
                        Ok(Effects::to(txn, phase)
                            .note(format!("token refused: {cause}"))
                            .send(self.ttp, Payload::TamperReport { cause }))
                    }
                }
            }
            Payload::CancelToken { customer } => {
                ctx.expect_from(msg, self.ttp)?;
                if *customer != txn.originator {
                    return Err(ctx.violation("cancellation names another customer"));
                }
                let prior = self.txns.get(&txn).map_or(Phase::Start, |r| r.phase);
                if prior == Phase::Declined {
                    // nothing was held; the customer already knows
                    return Ok(Effects::to(txn, Phase::Declined));
                }
                let released = self.revoke_active(&txn);
                let rec = self.txns.entry(txn).or_insert_with(|| CbTxn {
                    phase: Phase::Start,
                    customer: *customer,
                    account: None,
                    merchant: None,
                    amount: Amount::ZERO,
                    attempt: 0,
                    active: None,
                    issued: Vec::new(),
                    settled: None,
                });
                rec.phase = Phase::Cancelled;
                let eff = Effects::to(txn, Phase::Cancelled);
                let status = if released {
                    CompletionStatus::Refunded
                } else {
                    CompletionStatus::Aborted
                };
                Ok(eff.send(*customer, Payload::CompletionNotice { status, amount: None }))
            }
            other => Err(ctx.violation(format!("unexpected {}", other.kind()))),
        }
    }
}

/// Pure settlement check: returns the updated bank state and the outcome.
pub fn cb_settle(
    state: &CustomerBankState,
    keys: &KeyMaterial,
    txn: &TransactionId,
    sealed: &SealedToken,
) -> (CustomerBankState, SettleOutcome) {
    let mut next = state.clone();
    let outcome = next.settle(keys, txn, sealed);
    (next, outcome)
}
