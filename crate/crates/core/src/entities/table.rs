//! Per-role transition tables.
//!
//! Every (role, phase, input) triple is either listed in [`RULES`] or is a
//! protocol violation. [`step`](super::step) consults the table before any
//! role logic runs, and every accepted step reports the transition it took
//! so callers can check it against the table.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::message::MessageKind;
use crate::ids::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// No record of the transaction yet.
    Start,
    // customer
    Browsing,
    CheckingTrust,
    AwaitingToken,
    AwaitingGoods,
    AwaitingCompletion,
    Reissuing,
    // merchant
    Offered,
    AwaitingEscrowAck,
    // customer bank
    Issued,
    Revoked,
    Declined,
    Cancelled,
    // merchant bank
    AwaitingSettlement,
    // ttp
    Registered,
    Escrowed,
    Acked,
    Disputed,
    Released,
    AwaitingReissue,
    Expired,
    // shared
    Dispatched,
    Settled,
    Completed,
    Aborted,
    Refunded,
    Closed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .flat_map(phases)
            .find(|p| p.to_string() == s)
            .copied()
            .ok_or_else(|| format!("unknown phase {s:?}"))
    }
}

/// Phases a role's transactions can be in, `Start` first.
pub fn phases(role: Role) -> &'static [Phase] {
    use Phase::*;
    match role {
        Role::Customer => &[
            Start,
            Browsing,
            CheckingTrust,
            AwaitingToken,
            AwaitingGoods,
            AwaitingCompletion,
            Reissuing,
            Completed,
            Aborted,
            Refunded,
        ],
        Role::Merchant => &[Start, Offered, AwaitingEscrowAck, Dispatched, Completed, Closed],
        Role::CustomerBank => &[Start, Issued, Revoked, Declined, Settled, Cancelled],
        Role::MerchantBank => &[Start, AwaitingSettlement, Settled, Closed],
        Role::Ttp => &[
            Start,
            Registered,
            Escrowed,
            Acked,
            Dispatched,
            Disputed,
            Released,
            AwaitingReissue,
            Completed,
            Aborted,
            Expired,
        ],
    }
}

/// Phases from which no further progress is expected.
pub fn is_terminal(role: Role, phase: Phase) -> bool {
    use Phase::*;
    match role {
        Role::Customer => matches!(phase, Completed | Aborted | Refunded),
        Role::Merchant => matches!(phase, Completed | Closed),
        Role::CustomerBank => matches!(phase, Settled | Cancelled | Declined),
        Role::MerchantBank => matches!(phase, Settled | Closed),
        Role::Ttp => matches!(phase, Completed | Aborted | Expired),
    }
}

/// What drives a step: a delivered message or one of the entity's own timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InputKind {
    Message(MessageKind),
    StartTimer,
    DeadlineTimer,
}

impl InputKind {
    pub fn all() -> impl Iterator<Item = InputKind> {
        MessageKind::ALL
            .into_iter()
            .map(InputKind::Message)
            .chain([InputKind::StartTimer, InputKind::DeadlineTimer])
    }
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputKind::Message(kind) => write!(f, "{kind}"),
            InputKind::StartTimer => f.write_str("timer:start"),
            InputKind::DeadlineTimer => f.write_str("timer:deadline"),
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "timer:start" => Ok(InputKind::StartTimer),
            "timer:deadline" => Ok(InputKind::DeadlineTimer),
            other => other.parse().map(InputKind::Message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rule {
    pub role: Role,
    pub phase: Phase,
    pub input: InputKind,
    /// Phases the step may end in.
    pub next: &'static [Phase],
    /// Message kinds the step may emit.
    pub emits: &'static [MessageKind],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Transition(&'static Rule),
    Violation,
}

macro_rules! rules {
    ($( $role:ident $phase:ident $input:expr => [$($next:ident),*] [$($emit:ident),*] ;)*) => {
        &[$(Rule {
            role: Role::$role,
            phase: Phase::$phase,
            input: $input,
            next: &[$(Phase::$next),*],
            emits: &[$(MessageKind::$emit),*],
        }),*]
    };
}

const fn m(kind: MessageKind) -> InputKind {
    InputKind::Message(kind)
}

use MessageKind::*;

const START: InputKind = InputKind::StartTimer;
const DEADLINE: InputKind = InputKind::DeadlineTimer;

/// The defined transitions. Anything absent is a violation.
pub static RULES: &[Rule] = rules! {
    Customer Start START => [Browsing] [Browse];
    Customer Browsing m(Offer) => [CheckingTrust] [TrustLookup];
    Customer CheckingTrust m(TrustReply) => [AwaitingToken, Aborted] [TokenRequest, CompletionNotice];
    Customer CheckingTrust m(CompletionNotice) => [Aborted, Refunded] [];
    Customer AwaitingToken m(TokenIssued) => [AwaitingGoods] [PurchaseConfirm, EscrowDeposit];
    Customer AwaitingToken m(CompletionNotice) => [Aborted, Refunded] [CompletionNotice];
    Customer AwaitingGoods m(GoodsDispatch) => [AwaitingGoods, AwaitingCompletion] [AcceptGoods, RejectGoods];
    Customer AwaitingGoods m(RegenerateRequest) => [Reissuing] [TokenRequest];
    Customer AwaitingGoods m(CompletionNotice) => [Aborted, Refunded] [];
    Customer AwaitingCompletion m(RegenerateRequest) => [Reissuing] [TokenRequest];
    Customer AwaitingCompletion m(CompletionNotice) => [Completed, Aborted, Refunded] [];
    Customer Reissuing m(TokenIssued) => [AwaitingGoods, AwaitingCompletion] [EscrowDeposit];
    Customer Reissuing m(CompletionNotice) => [Aborted, Refunded] [CompletionNotice];

    Merchant Start m(Browse) => [Offered] [Offer];
    Merchant Offered m(PurchaseConfirm) => [AwaitingEscrowAck] [TempPaymentQuery];
    Merchant Offered m(CompletionNotice) => [Closed] [];
    Merchant AwaitingEscrowAck m(TempPaymentAck) => [Dispatched] [GoodsDispatch];
    Merchant AwaitingEscrowAck m(CompletionNotice) => [Closed] [];
    Merchant Dispatched m(RejectGoods) => [Dispatched] [GoodsDispatch];
    Merchant Dispatched m(Settlement) => [Completed] [CompletionNotice];
    Merchant Dispatched m(CompletionNotice) => [Closed] [];

    CustomerBank Start m(TokenRequest) => [Issued, Declined] [TokenIssued, CompletionNotice];
    CustomerBank Start m(PaymentRequest) => [Start] [TamperReport];
    CustomerBank Start m(CancelToken) => [Cancelled] [CompletionNotice];
    CustomerBank Issued m(TokenRequest) => [Issued, Declined] [TokenIssued, CompletionNotice];
    CustomerBank Issued m(PaymentRequest) => [Issued, Settled, Revoked] [Settlement, CompletionNotice, TamperReport];
    CustomerBank Issued m(CancelToken) => [Cancelled] [CompletionNotice];
    CustomerBank Revoked m(TokenRequest) => [Issued, Declined] [TokenIssued, CompletionNotice];
    CustomerBank Revoked m(PaymentRequest) => [Revoked] [TamperReport];
    CustomerBank Revoked m(CancelToken) => [Cancelled] [CompletionNotice];
    CustomerBank Declined m(PaymentRequest) => [Declined] [TamperReport];
    CustomerBank Declined m(CancelToken) => [Declined] [];
    CustomerBank Settled m(PaymentRequest) => [Settled] [TamperReport];
    CustomerBank Cancelled m(TokenRequest) => [Cancelled] [];
    CustomerBank Cancelled m(PaymentRequest) => [Cancelled] [TamperReport];

    MerchantBank Start m(TokenRelease) => [AwaitingSettlement] [PaymentRequest];
    MerchantBank AwaitingSettlement m(TokenRelease) => [AwaitingSettlement] [PaymentRequest];
    MerchantBank AwaitingSettlement m(Settlement) => [Settled] [Settlement];
    MerchantBank AwaitingSettlement m(CompletionNotice) => [Closed] [];

    Ttp Start m(TrustLookup) => [Registered] [TrustReply];
    Ttp Registered m(EscrowDeposit) => [Registered, Escrowed, Acked, Aborted] [TempPaymentAck, RegenerateRequest, CancelToken, CompletionNotice];
    Ttp Registered m(TempPaymentQuery) => [Registered] [];
    Ttp Registered m(CompletionNotice) => [Aborted] [];
    Ttp Registered DEADLINE => [Registered, Expired] [CancelToken, CompletionNotice];
    Ttp Escrowed m(TempPaymentQuery) => [Acked] [TempPaymentAck];
    Ttp Escrowed DEADLINE => [Escrowed, Expired] [CancelToken, CompletionNotice];
    Ttp Acked m(GoodsDispatch) => [Dispatched] [];
    Ttp Acked m(AcceptGoods) => [Released] [TokenRelease];
    Ttp Acked m(RejectGoods) => [Disputed] [RejectGoods];
    Ttp Acked DEADLINE => [Acked, Expired] [CancelToken, CompletionNotice];
    Ttp Dispatched m(GoodsDispatch) => [Dispatched] [];
    Ttp Dispatched m(AcceptGoods) => [Released] [TokenRelease];
    Ttp Dispatched m(RejectGoods) => [Disputed] [RejectGoods];
    Ttp Dispatched DEADLINE => [Dispatched, Expired] [CancelToken, CompletionNotice];
    Ttp Disputed m(GoodsDispatch) => [Dispatched] [];
    Ttp Disputed m(AcceptGoods) => [Released] [TokenRelease];
    Ttp Disputed m(RejectGoods) => [Disputed] [RejectGoods];
    Ttp Disputed DEADLINE => [Disputed, Expired] [CancelToken, CompletionNotice];
    Ttp Released m(GoodsDispatch) => [Released] [];
    Ttp Released m(CompletionNotice) => [Completed] [];
    Ttp Released m(TamperReport) => [Released, AwaitingReissue, Aborted] [RegenerateRequest, CancelToken, CompletionNotice];
    Ttp Released DEADLINE => [Released] [];
    Ttp AwaitingReissue m(EscrowDeposit) => [Released, AwaitingReissue, Aborted] [TokenRelease, RegenerateRequest, CancelToken, CompletionNotice];
    Ttp AwaitingReissue m(GoodsDispatch) => [AwaitingReissue] [];
    Ttp AwaitingReissue m(CompletionNotice) => [Aborted] [CompletionNotice];
    Ttp AwaitingReissue m(TamperReport) => [AwaitingReissue] [];
    Ttp AwaitingReissue DEADLINE => [AwaitingReissue, Expired] [CancelToken, CompletionNotice];
    Ttp Completed m(GoodsDispatch) => [Completed] [];
    Ttp Completed m(TamperReport) => [Completed] [];
    Ttp Completed DEADLINE => [Completed] [];
    Ttp Aborted m(TamperReport) => [Aborted] [];
    Ttp Aborted DEADLINE => [Aborted] [];
    Ttp Expired m(TamperReport) => [Expired] [];
    Ttp Expired DEADLINE => [Expired] [];
};

pub fn lookup(role: Role, phase: Phase, input: InputKind) -> Outcome {
    RULES
        .iter()
        .find(|r| r.role == role && r.phase == phase && r.input == input)
        .map_or(Outcome::Violation, Outcome::Transition)
}

/// Whether ending in `to` after emitting `emitted` is allowed from
/// (`role`, `from`, `input`).
pub fn permits(role: Role, from: Phase, input: InputKind, to: Phase, emitted: &[MessageKind]) -> bool {
    match lookup(role, from, input) {
        Outcome::Transition(rule) => {
            rule.next.contains(&to) && emitted.iter().all(|k| rule.emits.contains(k))
        }
        Outcome::Violation => false,
    }
}

/// One row per (role, phase, input), in declaration order.
pub fn rows() -> Vec<(Role, Phase, InputKind, Outcome)> {
    let mut out = Vec::new();
    for role in Role::ALL {
        for &phase in phases(role) {
            for input in InputKind::all() {
                out.push((role, phase, input, lookup(role, phase, input)));
            }
        }
    }
    out
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|")
}

/// The complete table, violations included, as CSV.
pub fn to_csv() -> String {
    let mut out = String::from("role,phase,input,outcome,next,emits\n");
    for (role, phase, input, outcome) in rows() {
        let (kind, next, emits) = match outcome {
            Outcome::Transition(rule) => ("transition", join(rule.next), join(rule.emits)),
            Outcome::Violation => ("violation", String::new(), String::new()),
        };
        out.push_str(&format!("{role},{phase},{input},{kind},{next},{emits}\n"));
    }
    out
}

/// Defined transitions as Markdown tables, one per role. Pairs not listed
/// are protocol violations.
pub fn to_markdown() -> String {
    let mut out = String::from("# Transition tables\n\n");
    out.push_str(
        "Generated by `tset transitions --format md`. Each row is a defined \
         transition; every (phase, input) pair not listed for a role is a protocol \
         violation, which leaves the entity's state unchanged. The full table, \
         violations included, is `crates/core/data/transitions.csv`.\n",
    );
    for role in Role::ALL {
        out.push_str(&format!("\n## {role}\n\n"));
        out.push_str("| phase | input | next | emits |\n|---|---|---|---|\n");
        for rule in RULES.iter().filter(|r| r.role == role) {
            let emits = if rule.emits.is_empty() {
                "-".to_string()
            } else {
                rule.emits.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
            };
            let next = rule.next.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ");
            out.push_str(&format!("| {} | {} | {} | {} |\n", rule.phase, rule.input, next, emits));
        }
    }
    out
}
