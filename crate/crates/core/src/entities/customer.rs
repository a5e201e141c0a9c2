//! Customer: browses, checks the merchant's standing, obtains a token from
//! its bank, escrows it with the TTP and judges the goods.

use std::collections::BTreeMap;

use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::message::{CompletionStatus, OrderInfo, Payload};
use super::{Ctx, Effects, Input, Phase, StepError, Tick, TimerTag};
use crate::ids::{AccountId, EntityId, ProductId, TransactionId};
use crate::token::{Certificate, SealedToken};
use crate::trust::{Grade, TrustStanding};

/// Minimum merchant grade a customer will buy from. With no threshold every
/// merchant is acceptable, unrated ones included; with a threshold an
/// unrated merchant is refused.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptancePolicy {
    pub min_grade: Option<Grade>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Proceed,
    Abort,
}

pub fn customer_decide(reply: &TrustStanding, policy: &AcceptancePolicy) -> Decision {
    match (policy.min_grade, reply) {
        (None, _) => Decision::Proceed,
        (Some(min), TrustStanding::Rated { grade, .. }) if *grade >= min => Decision::Proceed,
        _ => Decision::Abort,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodsVerdict {
    Accept,
    Reject,
}

/// How a customer judges delivered goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionBehavior {
    Never,
    /// Reject each delivery independently with this probability.
    Probability(f64),
    /// Verdicts for successive deliveries across all of this customer's
    /// purchases; accepts once the script runs out.
    Script(Vec<GoodsVerdict>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchasePlan {
    pub merchant: EntityId,
    pub product: ProductId,
    pub quantity: u32,
    pub start: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CustomerTxn {
    pub phase: Phase,
    pub purchase: usize,
    pub merchant: EntityId,
    pub order: Option<OrderInfo>,
    pub cert_merchant: Option<Certificate>,
    /// Latest token request number; 0 is the first.
    pub attempt: u32,
    pub token: Option<SealedToken>,
    pub accepted: bool,
    pub deliveries: u32,
    pub rejections: u32,
}

#[derive(Debug, Clone)]
pub struct CustomerState {
    pub account: AccountId,
    pub bank: EntityId,
    pub ttp: EntityId,
    pub policy: AcceptancePolicy,
    pub behavior: RejectionBehavior,
    pub purchases: Vec<PurchasePlan>,
    pub txns: BTreeMap<TransactionId, CustomerTxn>,
    next_serial: u64,
    script_pos: usize,
}

const REJECT_REASON: &str = "goods not as ordered";

impl CustomerState {
    pub fn new(
        account: AccountId,
        bank: EntityId,
        ttp: EntityId,
        policy: AcceptancePolicy,
        behavior: RejectionBehavior,
        purchases: Vec<PurchasePlan>,
    ) -> Self {
        CustomerState {
            account,
            bank,
            ttp,
            policy,
            behavior,
            purchases,
            txns: BTreeMap::new(),
            next_serial: 0,
            script_pos: 0,
        }
    }

    pub(crate) fn handle<R: RngCore + CryptoRng>(
        &mut self,
        ctx: &Ctx<'_>,
        input: &Input,
        rng: &mut R,
    ) -> Result<Effects, StepError> {
        let msg = match input {
            Input::Timer(TimerTag::StartPurchase { purchase }) => return self.start(ctx, *purchase),
            Input::Timer(_) => return Err(ctx.violation("customers keep no deadlines")),
            Input::Message(msg) => msg,
        };
        let mut rec = self
            .txns
            .get(&msg.txn)
            .cloned()
            .ok_or_else(|| ctx.violation("unknown transaction"))?;
        let txn = msg.txn;

        let effects = match &msg.payload {
            Payload::Offer {
                cert_merchant,
                order,
            } => {
                ctx.expect_from(msg, rec.merchant)?;
                ctx.directory.check_cert(cert_merchant, rec.merchant, msg.from)?;
                let plan = &self.purchases[rec.purchase];
                if order.merchant != rec.merchant
                    || order.product != plan.product
                    || order.quantity != plan.quantity
                    || order.quantity == 0
                    || order.total_price.0 == 0
                {
                    return Err(ctx.violation("offer does not match the request"));
                }
                rec.order = Some(order.clone());
                rec.cert_merchant = Some(cert_merchant.clone());
                Effects::to(txn, Phase::CheckingTrust).send(
                    self.ttp,
                    Payload::TrustLookup {
                        merchant: rec.merchant,
                    },
                )
            }
            Payload::TrustReply { merchant, standing } => {
                ctx.expect_from(msg, self.ttp)?;
                if *merchant != rec.merchant {
                    return Err(ctx.violation("trust reply for another merchant"));
                }
                match customer_decide(standing, &self.policy) {
                    Decision::Proceed => {
                        let eff = Effects::to(txn, Phase::AwaitingToken);
                        self.token_request(ctx, &rec, eff)
                    }
                    Decision::Abort => Effects::to(txn, Phase::Aborted)
                        .note(format!("merchant {} below acceptance policy", rec.merchant))
                        .send(self.ttp, aborted())
                        .send(rec.merchant, aborted()),
                }
            }
            Payload::TokenIssued { sealed } => {
                ctx.expect_from(msg, self.bank)?;
                let order = rec.order.clone().expect("order known once token requested");
                rec.token = Some(sealed.clone());
                let deposit = Payload::EscrowDeposit {
                    order: order.clone(),
                    sealed: sealed.clone(),
                };
                if ctx.phase == Phase::AwaitingToken {
                    Effects::to(txn, Phase::AwaitingGoods)
                        .send(
                            rec.merchant,
                            Payload::PurchaseConfirm {
                                cert_customer: ctx.certificate.clone(),
                                order,
                            },
                        )
                        .send(self.ttp, deposit)
                } else {
                    let next = if rec.accepted {
                        Phase::AwaitingCompletion
                    } else {
                        Phase::AwaitingGoods
                    };
                    Effects::to(txn, next).send(self.ttp, deposit)
                }
            }
            Payload::GoodsDispatch {
                order_number,
                product,
                quantity,
                ..
            } => {
                ctx.expect_from(msg, rec.merchant)?;
                let order = rec.order.as_ref().expect("order known before dispatch");
                if *order_number != order.order_number
                    || *product != order.product
                    || *quantity != order.quantity
                {
                    return Err(ctx.violation("delivery does not match the order"));
                }
                rec.deliveries += 1;
                match self.next_verdict(rng) {
                    GoodsVerdict::Accept => {
                        rec.accepted = true;
                        Effects::to(txn, Phase::AwaitingCompletion).send(
                            self.ttp,
                            Payload::AcceptGoods {
                                order_number: *order_number,
                            },
                        )
                    }
                    GoodsVerdict::Reject => {
                        rec.rejections += 1;
                        Effects::to(txn, Phase::AwaitingGoods).send(
                            self.ttp,
                            Payload::RejectGoods {
                                order_number: *order_number,
                                reason: REJECT_REASON.into(),
                            },
                        )
                    }
                }
            }
            Payload::RegenerateRequest { attempt } => {
                ctx.expect_from(msg, self.ttp)?;
                if *attempt <= rec.attempt {
                    return Err(ctx.violation("stale regeneration request"));
                }
                rec.attempt = *attempt;
                let eff = Effects::to(txn, Phase::Reissuing);
                self.token_request(ctx, &rec, eff)
            }
            Payload::CompletionNotice { status, .. } => {
                if msg.from != self.bank && msg.from != self.ttp {
                    return Err(ctx.violation("completion notice from a third party"));
                }
                match status {
                    CompletionStatus::Declined
                        if msg.from == self.bank
                            && matches!(ctx.phase, Phase::AwaitingToken | Phase::Reissuing) =>
                    {
                        Effects::to(txn, Phase::Aborted)
                            .note("token request declined")
                            .send(self.ttp, aborted())
                            .send(rec.merchant, aborted())
                    }
                    CompletionStatus::Completed
                        if msg.from == self.bank && ctx.phase == Phase::AwaitingCompletion =>
                    {
                        Effects::to(txn, Phase::Completed)
                    }
                    CompletionStatus::Aborted => Effects::to(txn, Phase::Aborted),
                    CompletionStatus::Refunded => Effects::to(txn, Phase::Refunded),
                    _ => return Err(ctx.violation(format!("unexpected {status:?} notice"))),
                }
            }
            other => return Err(ctx.violation(format!("unexpected {}", other.kind()))),
        };

        rec.phase = effects.to.expect("customer effects name a phase");
        self.txns.insert(txn, rec);
        Ok(effects)
    }

    fn start(&mut self, ctx: &Ctx<'_>, purchase: usize) -> Result<Effects, StepError> {
        let plan = self
            .purchases
            .get(purchase)
            .ok_or_else(|| ctx.violation(format!("no purchase #{purchase}")))?;
        if self.txns.values().any(|t| t.purchase == purchase) {
            return Err(ctx.violation(format!("purchase #{purchase} already started")));
        }
        self.next_serial += 1;
        let txn = TransactionId::new(ctx.id, self.next_serial);
        self.txns.insert(
            txn,
            CustomerTxn {
                phase: Phase::Browsing,
                purchase,
                merchant: plan.merchant,
                order: None,
                cert_merchant: None,
                attempt: 0,
                token: None,
                accepted: false,
                deliveries: 0,
                rejections: 0,
            },
        );
        Ok(Effects::to(txn, Phase::Browsing).send(
            plan.merchant,
            Payload::Browse {
                product: plan.product.clone(),
                quantity: plan.quantity,
            },
        ))
    }

    fn token_request(&self, ctx: &Ctx<'_>, rec: &CustomerTxn, eff: Effects) -> Effects {
        let order = rec.order.as_ref().expect("order known");
        eff.send(
            self.bank,
            Payload::TokenRequest {
                amount: order.total_price,
                account: self.account,
                cert_customer: ctx.certificate.clone(),
                cert_merchant: rec.cert_merchant.clone().expect("certificate known"),
                attempt: rec.attempt,
            },
        )
    }

    fn next_verdict<R: RngCore>(&mut self, rng: &mut R) -> GoodsVerdict {
        match &self.behavior {
            RejectionBehavior::Never => GoodsVerdict::Accept,
            RejectionBehavior::Probability(p) => {
                if rng.gen_bool(*p) {
                    GoodsVerdict::Reject
                } else {
                    GoodsVerdict::Accept
                }
            }
            RejectionBehavior::Script(script) => {
                let verdict = script.get(self.script_pos).copied().unwrap_or(GoodsVerdict::Accept);
                self.script_pos += 1;
                verdict
            }
        }
    }
}

fn aborted() -> Payload {
    Payload::CompletionNotice {
        status: CompletionStatus::Aborted,
        amount: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trust::Percent;

    fn rated(grade: Grade) -> TrustStanding {
        TrustStanding::Rated {
            tv: Percent::zero(),
            tf: Percent::hundred(),
            grade,
        }
    }

    fn min(grade: Grade) -> AcceptancePolicy {
        AcceptancePolicy {
            min_grade: Some(grade),
        }
    }

    #[test]
    fn above_threshold_proceeds() {
        assert_eq!(customer_decide(&rated(Grade::A1), &min(Grade::B1)), Decision::Proceed);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(customer_decide(&rated(Grade::B1), &min(Grade::B1)), Decision::Proceed);
        assert_eq!(customer_decide(&rated(Grade::B2), &min(Grade::B1)), Decision::Abort);
    }

    #[test]
    fn unrated_is_refused_under_a_threshold() {
        assert_eq!(customer_decide(&TrustStanding::Unrated, &min(Grade::B1)), Decision::Abort);
        assert_eq!(
            customer_decide(&TrustStanding::Unrated, &AcceptancePolicy::default()),
            Decision::Proceed
        );
    }
}
