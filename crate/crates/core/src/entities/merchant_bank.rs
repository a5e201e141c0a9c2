//! Merchant bank (acquirer): presents released tokens to the issuer and
//! credits the merchant when paid.

use std::collections::BTreeMap;

use super::message::Payload;
use super::{Ctx, Effects, Input, Phase, StepError};
use crate::ids::{EntityId, TransactionId};
use crate::token::Amount;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MbTxn {
    pub phase: Phase,
    pub merchant: EntityId,
    pub presentations: u32,
    pub credited: Option<Amount>,
}

#[derive(Debug, Clone)]
pub struct MerchantBankState {
    /// Merchant balances.
    pub accounts: BTreeMap<EntityId, Amount>,
    pub issuer: EntityId,
    pub ttp: EntityId,
    pub txns: BTreeMap<TransactionId, MbTxn>,
}

impl MerchantBankState {
    pub fn new(accounts: BTreeMap<EntityId, Amount>, issuer: EntityId, ttp: EntityId) -> Self {
        MerchantBankState {
            accounts,
            issuer,
            ttp,
            txns: BTreeMap::new(),
        }
    }

    pub fn total_funds(&self) -> Amount {
        self.accounts.values().copied().sum()
    }

    pub(crate) fn handle(&mut self, ctx: &Ctx<'_>, input: &Input) -> Result<Effects, StepError> {
        let Input::Message(msg) = input else {
            return Err(ctx.violation("banks keep no timers"));
        };
        let txn = msg.txn;
        match &msg.payload {
            Payload::TokenRelease { sealed, merchant } => {
                ctx.expect_from(msg, self.ttp)?;
                if !self.accounts.contains_key(merchant) {
                    return Err(ctx.violation(format!("{merchant} has no account here")));
                }
                if self.txns.get(&txn).is_some_and(|r| r.merchant != *merchant) {
                    return Err(ctx.violation("release names a different merchant"));
                }
                let rec = self.txns.entry(txn).or_insert(MbTxn {
                    phase: Phase::AwaitingSettlement,
                    merchant: *merchant,
                    presentations: 0,
                    credited: None,
                });
                rec.presentations += 1;
                Ok(Effects::to(txn, Phase::AwaitingSettlement).send(
                    self.issuer,
                    Payload::PaymentRequest {
                        sealed: sealed.clone(),
                    },
                ))
            }
            Payload::Settlement {
                amount,
                merchant,
                token_digest,
            } => {
                ctx.expect_from(msg, self.issuer)?;
                let rec = self
                    .txns
                    .get(&txn)
                    .ok_or_else(|| ctx.violation("unknown transaction"))?;
                if rec.merchant != *merchant {
                    return Err(ctx.violation("settlement for a different merchant"));
                }
                let balance = self.accounts.get_mut(merchant).expect("checked at release");
                *balance = balance
                    .checked_add(*amount)
                    .ok_or_else(|| ctx.violation("balance overflow"))?;
                let rec = self.txns.get_mut(&txn).expect("checked above");
                rec.credited = Some(*amount);
                rec.phase = Phase::Settled;
                Ok(Effects::to(txn, Phase::Settled).send(
                    *merchant,
                    Payload::Settlement {
                        amount: *amount,
                        merchant: *merchant,
                        token_digest: *token_digest,
                    },
                ))
            }
            Payload::CompletionNotice { status, .. } => {
                ctx.expect_from(msg, self.ttp)?;
                let rec = self
                    .txns
                    .get_mut(&txn)
                    .ok_or_else(|| ctx.violation("unknown transaction"))?;
                rec.phase = Phase::Closed;
                Ok(Effects::to(txn, Phase::Closed).note(format!("closed: {status:?}")))
            }
            other => Err(ctx.violation(format!("unexpected {}", other.kind()))),
        }
    }
}
