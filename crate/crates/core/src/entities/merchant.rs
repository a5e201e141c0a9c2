//! Merchant: quotes orders, waits for the TTP to confirm escrow, ships, and
//! re-ships after a rejection.

use std::collections::BTreeMap;

use super::message::{CompletionStatus, OrderInfo, Payload};
use super::{Ctx, Effects, Input, Phase, StepError};
use crate::ids::{EntityId, OrderNumber, ProductId, Role, TransactionId};
use crate::token::Amount;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerchantTxn {
    pub phase: Phase,
    pub customer: EntityId,
    pub order: OrderInfo,
    pub dispatches: u32,
}

#[derive(Debug, Clone)]
pub struct MerchantState {
    /// Unit prices.
    pub catalog: BTreeMap<ProductId, Amount>,
    pub ttp: EntityId,
    pub bank: EntityId,
    pub revenue: Amount,
    pub txns: BTreeMap<TransactionId, MerchantTxn>,
    next_order: u64,
}

impl MerchantState {
    pub fn new(catalog: BTreeMap<ProductId, Amount>, ttp: EntityId, bank: EntityId) -> Self {
        MerchantState {
            catalog,
            ttp,
            bank,
            revenue: Amount::ZERO,
            txns: BTreeMap::new(),
            next_order: 0,
        }
    }

    pub(crate) fn handle(&mut self, ctx: &Ctx<'_>, input: &Input) -> Result<Effects, StepError> {
        let Input::Message(msg) = input else {
            return Err(ctx.violation("merchants keep no timers"));
        };
        let txn = msg.txn;

        if let Payload::Browse { product, quantity } = &msg.payload {
            if msg.from.role != Role::Customer || txn.originator != msg.from {
                return Err(ctx.violation("browse must come from the transaction's customer"));
            }
            let unit = self
                .catalog
                .get(product)
                .ok_or_else(|| ctx.violation(format!("{product} not in catalog")))?;
            let total = unit
                .checked_mul(u64::from(*quantity))
                .filter(|t| *quantity > 0 && t.0 > 0)
                .ok_or_else(|| ctx.violation("quantity out of range"))?;
            self.next_order += 1;
            let order = OrderInfo {
                order_number: OrderNumber(self.next_order),
                product: product.clone(),
                quantity: *quantity,
                total_price: total,
                merchant: ctx.id,
            };
            self.txns.insert(
                txn,
                MerchantTxn {
                    phase: Phase::Offered,
                    customer: msg.from,
                    order: order.clone(),
                    dispatches: 0,
                },
            );
            return Ok(Effects::to(txn, Phase::Offered).send(
                msg.from,
                Payload::Offer {
                    cert_merchant: ctx.certificate.clone(),
                    order,
                },
            ));
        }

        let mut rec = self
            .txns
            .get(&txn)
            .cloned()
            .ok_or_else(|| ctx.violation("unknown transaction"))?;
        let mut revenue = self.revenue;

        let effects = match &msg.payload {
            Payload::PurchaseConfirm {
                cert_customer,
                order,
            } => {
                ctx.expect_from(msg, rec.customer)?;
                ctx.directory.check_cert(cert_customer, rec.customer, msg.from)?;
                if *order != rec.order {
                    return Err(ctx.violation("confirmed order differs from the offer"));
                }
                Effects::to(txn, Phase::AwaitingEscrowAck).send(
                    self.ttp,
                    Payload::TempPaymentQuery {
                        order_number: order.order_number,
                        amount: order.total_price,
                    },
                )
            }
            Payload::TempPaymentAck {
                order_number,
                amount,
                ..
            } => {
                ctx.expect_from(msg, self.ttp)?;
                if *order_number != rec.order.order_number || *amount != rec.order.total_price {
                    return Err(ctx.violation("acknowledgement does not match the order"));
                }
                self.dispatch(txn, &rec, Phase::Dispatched)
            }
            Payload::RejectGoods { order_number, .. } => {
                ctx.expect_from(msg, self.ttp)?;
                if *order_number != rec.order.order_number {
                    return Err(ctx.violation("rejection for another order"));
                }
                rec.dispatches += 1;
                self.dispatch(txn, &rec, Phase::Dispatched)
                    .note(format!("replacement #{} shipped", rec.dispatches))
            }
            Payload::Settlement { amount, merchant, .. } => {
                ctx.expect_from(msg, self.bank)?;
                if *merchant != ctx.id || *amount != rec.order.total_price {
                    return Err(ctx.violation("settlement does not match the order"));
                }
                revenue = revenue
                    .checked_add(*amount)
                    .ok_or_else(|| ctx.violation("revenue overflow"))?;
                Effects::to(txn, Phase::Completed).send(
                    self.ttp,
                    Payload::CompletionNotice {
                        status: CompletionStatus::Completed,
                        amount: Some(*amount),
                    },
                )
            }
            Payload::CompletionNotice { status, .. } => {
                if msg.from != rec.customer && msg.from != self.ttp {
                    return Err(ctx.violation("completion notice from a third party"));
                }
                Effects::to(txn, Phase::Closed).note(format!("closed: {status:?}"))
            }
            other => return Err(ctx.violation(format!("unexpected {}", other.kind()))),
        };

        rec.phase = effects.to.expect("merchant effects name a phase");
        self.txns.insert(txn, rec);
        self.revenue = revenue;
        Ok(effects)
    }

    fn dispatch(&self, txn: TransactionId, rec: &MerchantTxn, next: Phase) -> Effects {
        let goods = Payload::GoodsDispatch {
            order_number: rec.order.order_number,
            product: rec.order.product.clone(),
            quantity: rec.order.quantity,
            attempt: rec.dispatches,
        };
        Effects::to(txn, next)
            .send(rec.customer, goods.clone())
            .send(self.ttp, goods)
    }
}
