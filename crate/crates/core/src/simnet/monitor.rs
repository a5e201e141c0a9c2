//! Runtime checks of the global properties the protocol promises. A tripped
//! check is recorded, never fatal, so the trace stays complete.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::entities::{privacy_breach, EntityState, Outputs, Payload, ProtocolMessage, Tick};
use crate::ids::{EntityId, Role, TransactionId};
use crate::token::Amount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantKind {
    /// Customer plus merchant funds, plus interbank money in flight, is
    /// constant.
    Conservation,
    /// At most one interbank settlement per transaction.
    SingleSettlement,
    /// Settled amount never exceeds what the customer asked a token for.
    OverPayment,
    /// Each merchant's credit equals the tokens settled in its favour.
    MerchantCredit,
    Privacy,
    /// Every step matches a row of the role's transition table.
    TableConformance,
    LedgerChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub tick: Tick,
    pub invariant: InvariantKind,
    pub detail: String,
}

fn funds(entities: &BTreeMap<EntityId, EntityState>) -> u128 {
    entities
        .values()
        .map(|e| {
            if let Some(cb) = e.as_customer_bank() {
                cb.total_funds().0 as u128
            } else if let Some(mb) = e.as_merchant_bank() {
                mb.total_funds().0 as u128
            } else {
                0
            }
        })
        .sum()
}

fn is_interbank_settlement(msg: &ProtocolMessage) -> Option<(Amount, EntityId)> {
    match &msg.payload {
        Payload::Settlement { amount, merchant, .. }
            if msg.from.role == Role::CustomerBank && msg.to.role == Role::MerchantBank =>
        {
            Some((*amount, *merchant))
        }
        _ => None,
    }
}

pub(crate) struct Monitor {
    initial: u128,
    merchant_start: BTreeMap<EntityId, Amount>,
    in_flight: u128,
    conserved: bool,
    requested: BTreeMap<TransactionId, Amount>,
    settled: BTreeMap<TransactionId, (u32, u128)>,
    violations: Vec<Violation>,
}

impl Monitor {
    pub fn new(entities: &BTreeMap<EntityId, EntityState>) -> Self {
        let merchant_start = entities
            .values()
            .filter_map(EntityState::as_merchant_bank)
            .flat_map(|mb| mb.accounts.iter().map(|(m, a)| (*m, *a)))
            .collect();
        Monitor {
            initial: funds(entities),
            merchant_start,
            in_flight: 0,
            conserved: true,
            requested: BTreeMap::new(),
            settled: BTreeMap::new(),
            violations: Vec::new(),
        }
    }

    pub fn initial_funds(&self) -> Amount {
        Amount(self.initial as u64)
    }

    fn trip(&mut self, tick: Tick, invariant: InvariantKind, detail: String) {
        self.violations.push(Violation {
            tick,
            invariant,
            detail,
        });
    }

    /// Called with the sender's intent, before the attacker sees it.
    pub fn on_send(&mut self, tick: Tick, msg: &ProtocolMessage) {
        if let Payload::TokenRequest { amount, .. } = &msg.payload {
            let e = self.requested.entry(msg.txn).or_insert(Amount::ZERO);
            *e = (*e).max(*amount);
        }
        if let Some((amount, _)) = is_interbank_settlement(msg) {
            self.in_flight += amount.0 as u128;
            let (count, sum) = {
                let e = self.settled.entry(msg.txn).or_insert((0, 0));
                e.0 += 1;
                e.1 += amount.0 as u128;
                *e
            };
            if count > 1 {
                self.trip(tick, InvariantKind::SingleSettlement, format!("{} settled {count} times", msg.txn));
            }
            let asked = self.requested.get(&msg.txn).map_or(0, |a| a.0 as u128);
            if sum > asked {
                self.trip(
                    tick,
                    InvariantKind::OverPayment,
                    format!("{} settled {sum} against a request for {asked}", msg.txn),
                );
            }
        }
    }

    /// Interbank money on a message that never arrives is lost.
    pub fn on_drop(&mut self, msg: &ProtocolMessage) {
        if let Some((amount, _)) = is_interbank_settlement(msg) {
            self.in_flight -= amount.0 as u128;
        }
    }

    pub fn on_refused(&mut self, tick: Tick, msg: &ProtocolMessage) {
        self.check_privacy(tick, msg);
        self.on_drop(msg);
    }

    pub fn on_deliver(&mut self, tick: Tick, msg: &ProtocolMessage) {
        self.check_privacy(tick, msg);
        if let Some((amount, _)) = is_interbank_settlement(msg) {
            self.in_flight -= amount.0 as u128;
        }
    }

    fn check_privacy(&mut self, tick: Tick, msg: &ProtocolMessage) {
        if let Some(field) = privacy_breach(msg) {
            self.trip(
                tick,
                InvariantKind::Privacy,
                format!("{} to {} exposed {field:?}", msg.kind(), msg.to),
            );
        }
    }

    pub fn on_transition(&mut self, tick: Tick, out: &Outputs) {
        if !out.transition.conforms(&out.emitted_kinds()) {
            self.trip(
                tick,
                InvariantKind::TableConformance,
                format!("{:?} emitting {:?}", out.transition, out.emitted_kinds()),
            );
        }
    }

    pub fn check_funds(&mut self, tick: Tick, entities: &BTreeMap<EntityId, EntityState>) {
        let now = funds(entities) + self.in_flight;
        let ok = now == self.initial;
        if !ok && self.conserved {
            self.trip(
                tick,
                InvariantKind::Conservation,
                format!("funds {now} (incl. {} in flight), expected {}", self.in_flight, self.initial),
            );
        }
        self.conserved = ok;
    }

    pub fn finish(mut self, tick: Tick, entities: &BTreeMap<EntityId, EntityState>) -> Vec<Violation> {
        let mut owed: BTreeMap<EntityId, u128> = BTreeMap::new();
        for cb in entities.values().filter_map(EntityState::as_customer_bank) {
            for rec in cb.txns.values() {
                if let (Some(amount), Some(m)) = (rec.settled, rec.merchant) {
                    *owed.entry(m).or_default() += amount.0 as u128;
                }
            }
        }
        let mut found = Vec::new();
        for mb in entities.values().filter_map(EntityState::as_merchant_bank) {
            for (m, balance) in &mb.accounts {
                let start = self.merchant_start.get(m).map_or(0, |a| a.0 as u128);
                let credit = (balance.0 as u128).saturating_sub(start);
                let due = owed.get(m).copied().unwrap_or(0);
                if credit != due {
                    found.push((*m, credit, due));
                }
            }
        }
        for (m, credit, due) in found {
            self.trip(
                tick,
                InvariantKind::MerchantCredit,
                format!("{m} credited {credit}, settled tokens total {due}"),
            );
        }
        for ttp in entities.values().filter_map(EntityState::as_ttp) {
            if let Err(e) = ttp.ledger.verify_chain() {
                self.trip(tick, InvariantKind::LedgerChain, e.to_string());
            }
        }
        self.violations
    }
}
