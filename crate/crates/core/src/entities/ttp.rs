//! Trusted third party: answers trust lookups, holds escrowed tokens until
//! the customer accepts the goods, keeps the transaction log and trust
//! table, and drives token regeneration and deadline refunds.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::message::{CompletionStatus, MessageKind, OrderInfo, Payload, ProtocolMessage};
use super::{Ctx, EntityState, Effects, Input, Outputs, Phase, StepError, Tick, TimerRequest, TimerTag};
use crate::digest::Digest;
use crate::ids::{EntityId, OrderNumber, Role, TransactionId};
use crate::ledger::{Ledger, LedgerEntry, LedgerEvent};
use crate::token::{Amount, SealedToken, TamperCause};
use crate::trust::{Outcome, TrustTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtpTxn {
    pub phase: Phase,
    pub customer: EntityId,
    pub merchant: EntityId,
    pub order: Option<OrderInfo>,
    /// The escrowed token, until released.
    pub held: Option<SealedToken>,
    pub last_token: Option<Digest>,
    /// A temporary-payment query that arrived before the deposit.
    pub query: Option<(OrderNumber, Amount)>,
    pub last_disposition: Option<Outcome>,
    pub regenerations: u32,
    /// Only the deadline timer of this generation is live.
    pub generation: u64,
}

impl TtpTxn {
    fn oi_digest(&self) -> Option<Digest> {
        self.order.as_ref().map(OrderInfo::digest)
    }
}

#[derive(Debug, Clone)]
pub struct TtpState {
    pub ledger: Ledger,
    pub trust: TrustTable,
    pub deadline: Tick,
    pub retry_cap: u32,
    pub issuer: EntityId,
    pub acquirer: EntityId,
    pub txns: BTreeMap<TransactionId, TtpTxn>,
}

/// Changes staged while handling one input, committed only on success.
struct Work {
    me: EntityId,
    txn: TransactionId,
    rec: TtpTxn,
    eff: Effects,
    log: Vec<LedgerEntry>,
    outcomes: Vec<Outcome>,
}

impl Work {
    fn log(&mut self, now: Tick, actor: EntityId, event: LedgerEvent) {
        let entry = LedgerEntry::new(self.txn, now, actor, event)
            .with_digests(self.rec.last_token, self.rec.oi_digest());
        self.log.push(entry);
    }

    fn send(&mut self, to: EntityId, payload: Payload) {
        self.eff.out.push(super::Draft {
            to,
            txn: self.txn,
            payload,
        });
    }

    fn phase(&mut self, phase: Phase) {
        self.rec.phase = phase;
        self.eff.to = Some(phase);
    }

    fn arm(&mut self, deadline: Tick) {
        self.rec.generation += 1;
        self.eff.timers.push(TimerRequest {
            delay: deadline,
            tag: TimerTag::Deadline {
                txn: self.txn,
                generation: self.rec.generation,
            },
        });
    }

    fn dispose(&mut self, outcome: Outcome) {
        self.rec.last_disposition = Some(outcome);
        self.outcomes.push(outcome);
    }
}

fn notice(status: CompletionStatus) -> Payload {
    Payload::CompletionNotice {
        status,
        amount: None,
    }
}

impl TtpState {
    pub fn new(trust: TrustTable, deadline: Tick, retry_cap: u32, issuer: EntityId, acquirer: EntityId) -> Self {
        TtpState {
            ledger: Ledger::new(),
            trust,
            deadline,
            retry_cap,
            issuer,
            acquirer,
            txns: BTreeMap::new(),
        }
    }

    pub(crate) fn handle(&mut self, ctx: &Ctx<'_>, input: &Input) -> Result<Effects, StepError> {
        let txn = input.txn().ok_or_else(|| ctx.violation("input names no transaction"))?;
        if self.ledger.last_tick(&txn).is_some_and(|last| last > ctx.now) {
            return Err(ctx.violation("clock is behind the transaction log"));
        }

        let mut w = match (self.txns.get(&txn), input) {
            (Some(rec), _) => Work {
                me: ctx.id,
                txn,
                rec: rec.clone(),
                eff: Effects::to(txn, rec.phase),
                log: Vec::new(),
                outcomes: Vec::new(),
            },
            (None, Input::Message(msg)) => match &msg.payload {
                Payload::TrustLookup { merchant } => {
                    if msg.from.role != Role::Customer || txn.originator != msg.from {
                        return Err(ctx.violation("lookup must come from the transaction's customer"));
                    }
                    if merchant.role != Role::Merchant {
                        return Err(ctx.violation("lookup names a non-merchant"));
                    }
                    let mut w = Work {
                        me: ctx.id,
                        txn,
                        rec: TtpTxn {
                            phase: Phase::Registered,
                            customer: msg.from,
                            merchant: *merchant,
                            order: None,
                            held: None,
                            last_token: None,
                            query: None,
                            last_disposition: None,
                            regenerations: 0,
                            generation: 0,
                        },
                        eff: Effects::to(txn, Phase::Registered),
                        log: Vec::new(),
                        outcomes: Vec::new(),
                    };
                    w.send(
                        msg.from,
                        Payload::TrustReply {
                            merchant: *merchant,
                            standing: self.trust.lookup(merchant),
                        },
                    );
                    w.arm(self.deadline);
                    return Ok(self.commit(w));
                }
                _ => return Err(StepError::UnknownTxn(txn)),
            },
            (None, Input::Timer(_)) => return Err(StepError::UnknownTxn(txn)),
        };

        match input {
            Input::Timer(TimerTag::Deadline { generation, .. }) => self.on_deadline(ctx, &mut w, *generation),
            Input::Timer(_) => return Err(ctx.violation("unexpected timer")),
            Input::Message(msg) => self.on_message(ctx, &mut w, msg)?,
        }
        Ok(self.commit(w))
    }

    fn commit(&mut self, w: Work) -> Effects {
        for entry in w.log {
            self.ledger.append(entry).expect("tick order checked before handling");
        }
        if let Some(order) = &w.rec.order {
            for outcome in &w.outcomes {
                self.trust.record(w.rec.merchant, w.rec.customer, &order.product, *outcome);
            }
        }
        self.txns.insert(w.txn, w.rec);
        w.eff
    }

    fn on_message(&self, ctx: &Ctx<'_>, w: &mut Work, msg: &ProtocolMessage) -> Result<(), StepError> {
        let now = ctx.now;
        let phase = w.rec.phase;
        match &msg.payload {
            Payload::EscrowDeposit { order, sealed } => {
                ctx.expect_from(msg, w.rec.customer)?;
                if order.merchant != w.rec.merchant {
                    return Err(ctx.violation("order names another merchant"));
                }
                if w.rec.order.as_ref().is_some_and(|o| o != order) {
                    return Err(ctx.violation("order differs from the earlier deposit"));
                }
                self.hold_escrow(now, w, msg.from, order, sealed)
            }
            Payload::TempPaymentQuery {
                order_number,
                amount,
            } => {
                ctx.expect_from(msg, w.rec.merchant)?;
                if phase == Phase::Registered {
                    w.rec.query = Some((*order_number, *amount));
                    w.eff.notes.push("query waits for the deposit".into());
                    return Ok(());
                }
                let order = w.rec.order.as_ref().expect("escrowed implies order");
                if *order_number != order.order_number || *amount != order.total_price {
                    return Err(ctx.violation("query does not match the escrowed order"));
                }
                self.acknowledge(now, w);
                Ok(())
            }
            Payload::GoodsDispatch { order_number, .. } => {
                ctx.expect_from(msg, w.rec.merchant)?;
                let order = w.rec.order.as_ref().expect("dispatch implies order");
                if *order_number != order.order_number {
                    return Err(ctx.violation("dispatch for another order"));
                }
                w.log(now, msg.from, LedgerEvent::Dispatch);
                if matches!(phase, Phase::Acked | Phase::Disputed) {
                    w.phase(Phase::Dispatched);
                }
                Ok(())
            }
            Payload::AcceptGoods { order_number } | Payload::RejectGoods { order_number, .. } => {
                ctx.expect_from(msg, w.rec.customer)?;
                let order = w.rec.order.as_ref().expect("disposition implies order");
                if *order_number != order.order_number {
                    return Err(ctx.violation("disposition for another order"));
                }
                if w.rec.held.is_none() {
                    return Err(StepError::NoHeldToken(w.txn));
                }
                self.disposition(now, w, msg);
                Ok(())
            }
            Payload::TamperReport { cause } => {
                ctx.expect_from(msg, self.issuer)?;
                w.log(now, msg.from, LedgerEvent::Tamper { cause: cause.clone() });
                if phase == Phase::Released && !cause.is_replay() {
                    self.regenerate(now, w);
                } else {
                    w.eff.notes.push(format!("tamper report logged without regeneration: {cause}"));
                }
                Ok(())
            }
            Payload::CompletionNotice { status, amount } => match (phase, status) {
                (Phase::Released, CompletionStatus::Completed) => {
                    ctx.expect_from(msg, w.rec.merchant)?;
                    let paid = amount.ok_or_else(|| ctx.violation("completion without amount"))?;
                    w.log(now, msg.from, LedgerEvent::Settled { amount: paid });
                    w.phase(Phase::Completed);
                    Ok(())
                }
                (Phase::Registered | Phase::AwaitingReissue, CompletionStatus::Aborted) => {
                    ctx.expect_from(msg, w.rec.customer)?;
                    w.log(now, msg.from, LedgerEvent::Abort);
                    if phase == Phase::AwaitingReissue {
                        w.send(self.acquirer, notice(CompletionStatus::Aborted));
                    }
                    w.phase(Phase::Aborted);
                    Ok(())
                }
                _ => Err(ctx.violation(format!("unexpected {status:?} notice"))),
            },
            other => Err(ctx.violation(format!("unexpected {}", other.kind()))),
        }
    }

    fn hold_escrow(
        &self,
        now: Tick,
        w: &mut Work,
        customer: EntityId,
        order: &OrderInfo,
        sealed: &SealedToken,
    ) -> Result<(), StepError> {
        w.rec.order = Some(order.clone());
        w.rec.last_token = Some(sealed.digest());
        if !sealed.is_well_formed() {
            w.log(now, customer, LedgerEvent::Tamper { cause: TamperCause::Malformed });
            self.regenerate(now, w);
            return Ok(());
        }
        w.rec.held = Some(sealed.clone());
        w.log(now, customer, LedgerEvent::Deposit);
        w.arm(self.deadline);
        match w.rec.phase {
            Phase::AwaitingReissue => self.release(now, w),
            _ => {
                w.phase(Phase::Escrowed);
                match w.rec.query.take() {
                    Some((number, amount)) if number == order.order_number && amount == order.total_price => {
                        self.acknowledge(now, w)
                    }
                    Some(_) => w.eff.notes.push("early query does not match the order".into()),
                    None => {}
                }
            }
        }
        Ok(())
    }

    fn acknowledge(&self, now: Tick, w: &mut Work) {
        let order = w.rec.order.clone().expect("order known");
        let token_digest = w.rec.held.as_ref().expect("token held").digest();
        w.log(now, w.me, LedgerEvent::TempAck);
        w.send(
            w.rec.merchant,
            Payload::TempPaymentAck {
                order_number: order.order_number,
                token_digest,
                amount: order.total_price,
            },
        );
        w.phase(Phase::Acked);
    }

    fn disposition(&self, now: Tick, w: &mut Work, msg: &ProtocolMessage) {
        match &msg.payload {
            Payload::AcceptGoods { .. } => {
                w.log(now, msg.from, LedgerEvent::Accept);
                w.dispose(Outcome::Accepted);
                self.release(now, w);
            }
            Payload::RejectGoods { order_number, reason } => {
                w.log(now, msg.from, LedgerEvent::Reject { reason: reason.clone() });
                w.dispose(Outcome::Rejected);
                w.send(
                    w.rec.merchant,
                    Payload::RejectGoods {
                        order_number: *order_number,
                        reason: reason.clone(),
                    },
                );
                w.arm(self.deadline);
                w.phase(Phase::Disputed);
            }
            _ => unreachable!("caller passes dispositions only"),
        }
    }

    fn release(&self, now: Tick, w: &mut Work) {
        let sealed = w.rec.held.take().expect("token held");
        w.log(now, w.me, LedgerEvent::Release);
        w.send(
            self.acquirer,
            Payload::TokenRelease {
                sealed,
                merchant: w.rec.merchant,
            },
        );
        w.phase(Phase::Released);
    }

    /// Asks the customer for a fresh token, or aborts once the retry cap is
    /// spent.
    fn regenerate(&self, now: Tick, w: &mut Work) {
        let phase = w.rec.phase;
        w.rec.regenerations += 1;
        if w.rec.regenerations > self.retry_cap {
            w.log(now, w.me, LedgerEvent::Abort);
            match phase {
                Phase::Released => {
                    // the bank already revoked the token when it reported;
                    // cancelling closes its record and it tells the customer
                    w.send(self.issuer, Payload::CancelToken { customer: w.rec.customer });
                    w.send(w.rec.merchant, notice(CompletionStatus::Aborted));
                    w.send(self.acquirer, notice(CompletionStatus::Aborted));
                }
                _ => {
                    w.send(self.issuer, Payload::CancelToken { customer: w.rec.customer });
                    w.send(w.rec.merchant, notice(CompletionStatus::Aborted));
                    if phase == Phase::AwaitingReissue {
                        w.send(self.acquirer, notice(CompletionStatus::Aborted));
                    }
                }
            }
            w.phase(Phase::Aborted);
            return;
        }
        w.log(now, w.me, LedgerEvent::Regenerate);
        w.send(
            w.rec.customer,
            Payload::RegenerateRequest {
                attempt: w.rec.regenerations,
            },
        );
        w.arm(self.deadline);
        if phase == Phase::Released {
            w.phase(Phase::AwaitingReissue);
        }
    }

    fn on_deadline(&self, ctx: &Ctx<'_>, w: &mut Work, generation: u64) {
        let phase = w.rec.phase;
        let live = generation == w.rec.generation
            && !matches!(phase, Phase::Released | Phase::Completed | Phase::Aborted | Phase::Expired);
        if !live {
            w.eff.notes.push("stale deadline".into());
            return;
        }
        w.log(ctx.now, ctx.id, LedgerEvent::DeadlineExpired);
        // a dispute already counted its rejection
        if matches!(phase, Phase::Acked | Phase::Dispatched) {
            w.dispose(Outcome::Rejected);
        }
        w.send(self.issuer, Payload::CancelToken { customer: w.rec.customer });
        w.send(w.rec.merchant, notice(CompletionStatus::Refunded));
        if phase == Phase::AwaitingReissue {
            w.send(self.acquirer, notice(CompletionStatus::Aborted));
        }
        w.phase(Phase::Expired);
    }
}

fn run_as(
    ttp: &EntityState,
    msg: &ProtocolMessage,
    now: Tick,
    kinds: &[MessageKind],
    what: &str,
) -> (EntityState, Result<Outputs, StepError>) {
    if ttp.id.role != Role::Ttp || !kinds.contains(&msg.kind()) {
        let err = StepError::ProtocolViolation {
            role: ttp.id.role,
            phase: ttp.phase(&msg.txn),
            input: super::InputKind::Message(msg.kind()),
            detail: format!("not a {what}"),
        };
        return (ttp.clone(), Err(err));
    }
    // the TTP draws no randomness
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    super::step(ttp, &Input::Message(msg.clone()), now, &mut rng)
}

/// Takes an escrow deposit into custody.
pub fn ttp_hold_escrow(ttp: &EntityState, deposit: &ProtocolMessage, now: Tick) -> (EntityState, Result<Outputs, StepError>) {
    run_as(ttp, deposit, now, &[MessageKind::EscrowDeposit], "deposit")
}

/// Applies the customer's acceptance or rejection of the goods.
pub fn ttp_disposition(ttp: &EntityState, verdict: &ProtocolMessage, now: Tick) -> (EntityState, Result<Outputs, StepError>) {
    run_as(
        ttp,
        verdict,
        now,
        &[MessageKind::AcceptGoods, MessageKind::RejectGoods],
        "goods verdict",
    )
}

/// Handles the bank's tamper report.
pub fn regenerate_flow(ttp: &EntityState, report: &ProtocolMessage, now: Tick) -> (EntityState, Result<Outputs, StepError>) {
    run_as(ttp, report, now, &[MessageKind::TamperReport], "tamper report")
}
