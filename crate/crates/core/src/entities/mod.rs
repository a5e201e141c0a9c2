//! The five protocol participants as deterministic state machines.
//!
//! An entity consumes one [`Input`] at a time (a delivered message or one of
//! its own timers) and produces signed messages, timer requests and the
//! transition it took. Inputs that the role's transition table does not allow
//! in the transaction's current phase are refused with no state change.

mod customer;
mod customer_bank;
mod merchant;
mod merchant_bank;
pub mod message;
pub mod table;
mod ttp;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

pub use customer::{
    customer_decide, AcceptancePolicy, CustomerState, CustomerTxn, Decision, GoodsVerdict,
    PurchasePlan, RejectionBehavior,
};
pub use customer_bank::{cb_settle, Account, CbTxn, CustomerBankState, SettleOutcome};
pub use merchant::{MerchantState, MerchantTxn};
pub use merchant_bank::{MbTxn, MerchantBankState};
pub use message::{
    privacy_breach, CompletionStatus, FieldTag, MessageKind, OrderInfo, Payload, ProtocolMessage,
};
pub use table::{InputKind, Phase};
pub use ttp::{regenerate_flow, ttp_disposition, ttp_hold_escrow, TtpState, TtpTxn};

use crate::ids::{EntityId, Role, TransactionId};
use crate::token::{Certificate, KeyMaterial, RootKey};

/// Simulation time. One tick is one millisecond of token timestamp.
pub type Tick = u64;

/// Certificates of every participant plus the root they chain to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directory {
    root: RootKey,
    certs: BTreeMap<EntityId, Certificate>,
}

impl Directory {
    pub fn new(root: RootKey) -> Self {
        Directory {
            root,
            certs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, cert: Certificate) {
        self.certs.insert(cert.subject, cert);
    }

    pub fn root(&self) -> &RootKey {
        &self.root
    }

    pub fn certificate(&self, id: &EntityId) -> Option<&Certificate> {
        self.certs.get(id)
    }

    /// Checks the sender's certificate and the message signature.
    pub fn authenticate(&self, msg: &ProtocolMessage) -> Result<(), StepError> {
        let fail = |reason: &str| StepError::AuthFailure {
            from: msg.from,
            reason: reason.to_string(),
        };
        let cert = self.certs.get(&msg.from).ok_or_else(|| fail("no certificate"))?;
        if !cert.verify(&self.root) {
            return Err(fail("certificate not signed by root"));
        }
        if !msg.verify(&cert.public_key) {
            return Err(fail("bad signature"));
        }
        Ok(())
    }

    /// A certificate carried inside a payload must chain to the root and name
    /// the expected subject.
    pub(crate) fn check_cert(
        &self,
        cert: &Certificate,
        subject: EntityId,
        from: EntityId,
    ) -> Result<(), StepError> {
        if cert.subject != subject || !cert.verify(&self.root) {
            return Err(StepError::AuthFailure {
                from,
                reason: format!("certificate for {} rejected", cert.subject),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerTag {
    /// Customer begins its `purchase`-th planned purchase.
    StartPurchase { purchase: usize },
    /// TTP dispute deadline; only the latest generation is live.
    Deadline { txn: TransactionId, generation: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Message(ProtocolMessage),
    Timer(TimerTag),
}

impl Input {
    pub fn kind(&self) -> InputKind {
        match self {
            Input::Message(msg) => InputKind::Message(msg.kind()),
            Input::Timer(TimerTag::StartPurchase { .. }) => InputKind::StartTimer,
            Input::Timer(TimerTag::Deadline { .. }) => InputKind::DeadlineTimer,
        }
    }

    pub fn txn(&self) -> Option<TransactionId> {
        match self {
            Input::Message(msg) => Some(msg.txn),
            Input::Timer(TimerTag::Deadline { txn, .. }) => Some(*txn),
            Input::Timer(TimerTag::StartPurchase { .. }) => None,
        }
    }
}

/// A timer the entity wants delivered back to itself after `delay` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerRequest {
    pub delay: Tick,
    pub tag: TimerTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub role: Role,
    pub txn: Option<TransactionId>,
    pub from: Phase,
    pub input: InputKind,
    pub to: Phase,
}

impl Transition {
    pub fn conforms(&self, emitted: &[MessageKind]) -> bool {
        table::permits(self.role, self.from, self.input, self.to, emitted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outputs {
    pub messages: Vec<ProtocolMessage>,
    pub timers: Vec<TimerRequest>,
    pub transition: Transition,
    pub notes: Vec<String>,
}

impl Outputs {
    pub fn emitted_kinds(&self) -> Vec<MessageKind> {
        self.messages.iter().map(|m| m.kind()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("protocol violation: {role} in {phase} cannot take {input}: {detail}")]
    ProtocolViolation {
        role: Role,
        phase: Phase,
        input: InputKind,
        detail: String,
    },
    #[error("authentication failed for {from}: {reason}")]
    AuthFailure { from: EntityId, reason: String },
    #[error("message for {to} delivered to {at}")]
    Misaddressed { to: EntityId, at: EntityId },
    #[error("duplicate escrow deposit for {0}")]
    DuplicateDeposit(TransactionId),
    #[error("unknown transaction {0}")]
    UnknownTxn(TransactionId),
    #[error("no token held for {0}")]
    NoHeldToken(TransactionId),
}

/// An outgoing message before signing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draft {
    pub to: EntityId,
    pub txn: TransactionId,
    pub payload: Payload,
}

/// What a role handler decided.
#[derive(Debug, Default)]
pub(crate) struct Effects {
    pub txn: Option<TransactionId>,
    pub to: Option<Phase>,
    pub out: Vec<Draft>,
    pub timers: Vec<TimerRequest>,
    pub notes: Vec<String>,
}

impl Effects {
    pub(crate) fn to(txn: TransactionId, phase: Phase) -> Self {
        Effects {
            txn: Some(txn),
            to: Some(phase),
            ..Effects::default()
        }
    }

    pub(crate) fn send(mut self, to: EntityId, payload: Payload) -> Self {
        let txn = self.txn.expect("effects carry a transaction");
        self.out.push(Draft { to, txn, payload });
        self
    }

    pub(crate) fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

/// Read-only context handed to role handlers.
pub(crate) struct Ctx<'a> {
    pub id: EntityId,
    pub keys: &'a KeyMaterial,
    pub certificate: &'a Certificate,
    pub directory: &'a Directory,
    pub now: Tick,
    pub phase: Phase,
    pub input: InputKind,
}

impl Ctx<'_> {
    pub(crate) fn violation(&self, detail: impl Into<String>) -> StepError {
        StepError::ProtocolViolation {
            role: self.id.role,
            phase: self.phase,
            input: self.input,
            detail: detail.into(),
        }
    }

    /// Refuses a message whose sender is not `expected`.
    pub(crate) fn expect_from(&self, msg: &ProtocolMessage, expected: EntityId) -> Result<(), StepError> {
        if msg.from != expected {
            return Err(self.violation(format!("expected sender {expected}, got {}", msg.from)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum RoleState {
    Customer(CustomerState),
    Merchant(MerchantState),
    CustomerBank(CustomerBankState),
    MerchantBank(MerchantBankState),
    Ttp(TtpState),
}

impl RoleState {
    fn role(&self) -> Role {
        match self {
            RoleState::Customer(_) => Role::Customer,
            RoleState::Merchant(_) => Role::Merchant,
            RoleState::CustomerBank(_) => Role::CustomerBank,
            RoleState::MerchantBank(_) => Role::MerchantBank,
            RoleState::Ttp(_) => Role::Ttp,
        }
    }

    fn phase(&self, txn: &TransactionId) -> Phase {
        let found = match self {
            RoleState::Customer(s) => s.txns.get(txn).map(|t| t.phase),
            RoleState::Merchant(s) => s.txns.get(txn).map(|t| t.phase),
            RoleState::CustomerBank(s) => s.txns.get(txn).map(|t| t.phase),
            RoleState::MerchantBank(s) => s.txns.get(txn).map(|t| t.phase),
            RoleState::Ttp(s) => s.txns.get(txn).map(|t| t.phase),
        };
        found.unwrap_or(Phase::Start)
    }

    fn transactions(&self) -> Vec<(TransactionId, Phase)> {
        fn collect<T>(m: &BTreeMap<TransactionId, T>, f: impl Fn(&T) -> Phase) -> Vec<(TransactionId, Phase)> {
            m.iter().map(|(k, v)| (*k, f(v))).collect()
        }
        match self {
            RoleState::Customer(s) => collect(&s.txns, |t| t.phase),
            RoleState::Merchant(s) => collect(&s.txns, |t| t.phase),
            RoleState::CustomerBank(s) => collect(&s.txns, |t| t.phase),
            RoleState::MerchantBank(s) => collect(&s.txns, |t| t.phase),
            RoleState::Ttp(s) => collect(&s.txns, |t| t.phase),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntityState {
    pub id: EntityId,
    pub keys: KeyMaterial,
    pub certificate: Certificate,
    pub directory: Arc<Directory>,
    pub role: RoleState,
}

impl EntityState {
    pub fn new(keys: KeyMaterial, certificate: Certificate, directory: Arc<Directory>, role: RoleState) -> Self {
        assert_eq!(certificate.subject.role, role.role(), "certificate names another role");
        EntityState {
            id: certificate.subject,
            keys,
            certificate,
            directory,
            role,
        }
    }

    pub fn phase(&self, txn: &TransactionId) -> Phase {
        self.role.phase(txn)
    }

    /// Every transaction this entity has a record of, with its phase.
    pub fn transactions(&self) -> Vec<(TransactionId, Phase)> {
        self.role.transactions()
    }

    pub fn as_customer(&self) -> Option<&CustomerState> {
        match &self.role {
            RoleState::Customer(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_merchant(&self) -> Option<&MerchantState> {
        match &self.role {
            RoleState::Merchant(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_customer_bank(&self) -> Option<&CustomerBankState> {
        match &self.role {
            RoleState::CustomerBank(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_merchant_bank(&self) -> Option<&MerchantBankState> {
        match &self.role {
            RoleState::MerchantBank(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_ttp(&self) -> Option<&TtpState> {
        match &self.role {
            RoleState::Ttp(s) => Some(s),
            _ => None,
        }
    }

    /// Applies `input` in place. On error the state is untouched.
    pub fn step_mut<R: RngCore + CryptoRng>(
        &mut self,
        input: &Input,
        now: Tick,
        rng: &mut R,
    ) -> Result<Outputs, StepError> {
        let kind = input.kind();
        if let Input::Message(msg) = input {
            if msg.to != self.id {
                return Err(StepError::Misaddressed {
                    to: msg.to,
                    at: self.id,
                });
            }
            self.directory.authenticate(msg)?;
        }
        let from = input.txn().map_or(Phase::Start, |t| self.phase(&t));
        if table::lookup(self.id.role, from, kind) == table::Outcome::Violation {
            return Err(refine_violation(self.id.role, from, kind, input));
        }

        let ctx = Ctx {
            id: self.id,
            keys: &self.keys,
            certificate: &self.certificate,
            directory: &self.directory,
            now,
            phase: from,
            input: kind,
        };
        let effects = match &mut self.role {
            RoleState::Customer(s) => s.handle(&ctx, input, rng)?,
            RoleState::Merchant(s) => s.handle(&ctx, input)?,
            RoleState::CustomerBank(s) => s.handle(&ctx, input, rng)?,
            RoleState::MerchantBank(s) => s.handle(&ctx, input)?,
            RoleState::Ttp(s) => s.handle(&ctx, input)?,
        };

        let txn = effects.txn.or(input.txn());
        let to = effects.to.unwrap_or(from);
        let messages: Vec<ProtocolMessage> = effects
            .out
            .into_iter()
            .map(|d| ProtocolMessage::signed(self.id, d.to, d.txn, d.payload, &self.keys))
            .collect();
        let outputs = Outputs {
            transition: Transition {
                role: self.id.role,
                txn,
                from,
                input: kind,
                to,
            },
            messages,
            timers: effects.timers,
            notes: effects.notes,
        };
        debug_assert!(
            outputs.transition.conforms(&outputs.emitted_kinds()),
            "{:?} emitted {:?}",
            outputs.transition,
            outputs.emitted_kinds()
        );
        Ok(outputs)
    }
}

/// Pure form of [`EntityState::step_mut`]: the input state is not modified.
pub fn step<R: RngCore + CryptoRng>(
    state: &EntityState,
    input: &Input,
    now: Tick,
    rng: &mut R,
) -> (EntityState, Result<Outputs, StepError>) {
    let mut next = state.clone();
    let result = next.step_mut(input, now, rng);
    (next, result)
}

fn refine_violation(role: Role, phase: Phase, input: InputKind, raw: &Input) -> StepError {
    let txn = raw.txn();
    if role == Role::Ttp {
        if let (Some(txn), InputKind::Message(kind)) = (txn, input) {
            match (phase, kind) {
                (Phase::Start, MessageKind::EscrowDeposit | MessageKind::TamperReport) => {
                    return StepError::UnknownTxn(txn)
                }
                (Phase::Start, MessageKind::AcceptGoods | MessageKind::RejectGoods) => {
                    return StepError::UnknownTxn(txn)
                }
                (Phase::Escrowed | Phase::Acked | Phase::Dispatched | Phase::Disputed, MessageKind::EscrowDeposit) => {
                    return StepError::DuplicateDeposit(txn)
                }
                (Phase::Registered, MessageKind::AcceptGoods | MessageKind::RejectGoods) => {
                    return StepError::NoHeldToken(txn)
                }
                _ => {}
            }
        }
    }
    StepError::ProtocolViolation {
        role,
        phase,
        input,
        detail: "not allowed by the transition table".into(),
    }
}

#[cfg(test)]
pub(crate) mod testkit;

#[cfg(test)]
mod tests;
