//! Deterministic discrete-event network joining the entities, with an
//! attacker sitting on every link.
//!
//! Events are ordered by `(deliver_at, seq)`; `seq` grows with every
//! insertion, so equal-time events keep their send order and each link is
//! FIFO unless a delay is injected. A run is a pure function of the world,
//! the attacker script and the seed.

pub mod adversary;
mod monitor;

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

pub use adversary::{
    inject, random_mutation, ActionKind, Adversary, AdversaryAction, Chaos, Injection, Target, REPLAY_LAG,
};
pub use monitor::{InvariantKind, Violation};

use crate::entities::{
    CustomerBankState, EntityState, Input, MerchantBankState, MessageKind, Payload, Phase, ProtocolMessage, Tick,
    TimerTag, TtpState,
};
use crate::ids::{EntityId, Role, TransactionId};
use crate::token::{Amount, TamperCause};
use monitor::Monitor;

pub const DEFAULT_LATENCY: Tick = 1;
pub const DEFAULT_TICK_LIMIT: Tick = 10_000;

/// Everything a run starts from.
#[derive(Debug, Clone)]
pub struct World {
    pub entities: BTreeMap<EntityId, EntityState>,
    /// Timers armed before the first tick, e.g. customers' purchase starts.
    pub timers: Vec<(Tick, EntityId, TimerTag)>,
}

impl World {
    pub fn get(&self, id: &EntityId) -> Option<&EntityState> {
        self.entities.get(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub latency: Tick,
    pub tick_limit: Tick,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            latency: DEFAULT_LATENCY,
            tick_limit: DEFAULT_TICK_LIMIT,
        }
    }
}

/// A queued event. The queue key `(deliver_at, seq)` orders delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
enum EventBody {
    Deliver {
        msg: ProtocolMessage,
        mutated: bool,
        tag: Option<String>,
    },
    Timer {
        at: EntityId,
        tag: TimerTag,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Deliver,
    Drop,
    Timer,
}

/// One line of the exported trace. Field order is part of the format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub tick: Tick,
    pub event: TraceEvent,
    pub edge: String,
    pub kind: String,
    pub txn: Option<TransactionId>,
    pub mutated: bool,
    pub digest: String,
    /// The attacker's action on this message, if any.
    pub adversary: Option<String>,
    /// Why the receiver refused the input, if it did.
    pub error: Option<String>,
    #[serde(skip)]
    pub message: Option<ProtocolMessage>,
}

impl TraceRecord {
    pub fn delivered(&self) -> Option<&ProtocolMessage> {
        match self.event {
            TraceEvent::Deliver => self.message.as_ref(),
            _ => None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "end")]
pub enum RunEnd {
    Quiescent { tick: Tick },
    TickLimitExceeded { tick: Tick, pending: usize },
}

/// The complete ordered record of a run and the entities' final states.
#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub entities: BTreeMap<EntityId, EntityState>,
    pub end: RunEnd,
    pub violations: Vec<Violation>,
    pub initial_funds: Amount,
}

impl Trace {
    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn delivered(&self) -> impl Iterator<Item = &ProtocolMessage> {
        self.records.iter().filter_map(TraceRecord::delivered)
    }

    pub fn count_delivered(&self, kind: MessageKind) -> usize {
        self.delivered().filter(|m| m.kind() == kind).count()
    }

    fn single<T>(&self, f: impl Fn(&EntityState) -> Option<&T>) -> &T {
        self.entities.values().find_map(f).expect("world has this role")
    }

    pub fn ttp(&self) -> &TtpState {
        self.single(EntityState::as_ttp)
    }

    pub fn customer_bank(&self) -> &CustomerBankState {
        self.single(EntityState::as_customer_bank)
    }

    pub fn merchant_bank(&self) -> &MerchantBankState {
        self.single(EntityState::as_merchant_bank)
    }

    pub fn total_funds(&self) -> Amount {
        Amount(self.customer_bank().total_funds().0 + self.merchant_bank().total_funds().0)
    }

    /// Interbank settlements that arrived at the merchant bank.
    pub fn settlements(&self) -> impl Iterator<Item = (&ProtocolMessage, Amount, EntityId)> {
        self.records
            .iter()
            .filter(|r| r.accepted())
            .filter_map(TraceRecord::delivered)
            .filter(|m| m.from.role == Role::CustomerBank && m.to.role == Role::MerchantBank)
            .filter_map(|m| match &m.payload {
                Payload::Settlement { amount, merchant, .. } => Some((m, *amount, *merchant)),
                _ => None,
            })
    }

    pub fn tamper_reports(&self) -> impl Iterator<Item = (&ProtocolMessage, &TamperCause)> {
        self.delivered().filter_map(|m| match &m.payload {
            Payload::TamperReport { cause } => Some((m, cause)),
            _ => None,
        })
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> Summary {
        let mut s = Summary {
            end: self.end,
            ..Summary::default()
        };
        for e in self.entities.values() {
            if e.id.role != Role::Customer {
                continue;
            }
            for (_, phase) in e.transactions() {
                s.attempted += 1;
                match phase {
                    Phase::Completed => s.completed += 1,
                    Phase::Aborted => s.aborted += 1,
                    Phase::Refunded => s.refunded += 1,
                    _ => s.unfinished += 1,
                }
            }
        }
        s.tamper_reports = self.tamper_reports().count();
        s.regenerations = self.count_delivered(MessageKind::RegenerateRequest);
        s.rejections = self.count_delivered(MessageKind::RejectGoods);
        for (_, amount, _) in self.settlements() {
            s.settlements += 1;
            s.total_settled = Amount(s.total_settled.0 + amount.0);
        }
        s.dropped = self.records.iter().filter(|r| r.event == TraceEvent::Drop).count();
        s.mutated = self.records.iter().filter(|r| r.mutated).count();
        s.refused = self.records.iter().filter(|r| !r.accepted()).count();
        s.violations = self.violations.len();
        s.funds_before = self.initial_funds;
        s.funds_after = self.total_funds();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub end: RunEnd,
    pub attempted: usize,
    pub completed: usize,
    pub aborted: usize,
    pub refunded: usize,
    pub unfinished: usize,
    pub settlements: usize,
    pub total_settled: Amount,
    pub rejections: usize,
    pub tamper_reports: usize,
    pub regenerations: usize,
    pub dropped: usize,
    pub mutated: usize,
    pub refused: usize,
    pub violations: usize,
    pub funds_before: Amount,
    pub funds_after: Amount,
}

impl Default for Summary {
    fn default() -> Self {
        Summary {
            end: RunEnd::Quiescent { tick: 0 },
            attempted: 0,
            completed: 0,
            aborted: 0,
            refunded: 0,
            unfinished: 0,
            settlements: 0,
            total_settled: Amount::ZERO,
            rejections: 0,
            tamper_reports: 0,
            regenerations: 0,
            dropped: 0,
            mutated: 0,
            refused: 0,
            violations: 0,
            funds_before: Amount::ZERO,
            funds_after: Amount::ZERO,
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end {
            RunEnd::Quiescent { tick } => writeln!(f, "end: quiescent at tick {tick}")?,
            RunEnd::TickLimitExceeded { tick, pending } => {
                writeln!(f, "end: tick limit exceeded at tick {tick} ({pending} events pending)")?
            }
        }
        let rows: [(&str, String); 16] = [
            ("transactions attempted", self.attempted.to_string()),
            ("completed", self.completed.to_string()),
            ("aborted", self.aborted.to_string()),
            ("refunded", self.refunded.to_string()),
            ("unfinished", self.unfinished.to_string()),
            ("settlements", self.settlements.to_string()),
            ("total settled", self.total_settled.0.to_string()),
            ("goods rejections", self.rejections.to_string()),
            ("tamper reports", self.tamper_reports.to_string()),
            ("regenerations", self.regenerations.to_string()),
            ("messages dropped", self.dropped.to_string()),
            ("messages mutated", self.mutated.to_string()),
            ("inputs refused", self.refused.to_string()),
            ("funds before", self.funds_before.0.to_string()),
            ("funds after", self.funds_after.0.to_string()),
            ("invariant violations", self.violations.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k}: {v}")?;
        }
        Ok(())
    }
}

struct Sim {
    entities: BTreeMap<EntityId, EntityState>,
    queue: BTreeMap<(Tick, u64), EventBody>,
    seq: u64,
    now: Tick,
    cfg: SimConfig,
    rng: ChaCha20Rng,
    adversary: Adversary,
    /// Cleartext prices the attacker has read, by transaction.
    seen_amounts: BTreeMap<TransactionId, Amount>,
    records: Vec<TraceRecord>,
    monitor: Monitor,
}

fn edge(from: EntityId, to: EntityId) -> String {
    format!("{from}->{to}")
}

impl Sim {
    fn push(&mut self, at: Tick, body: EventBody) {
        self.queue.insert((at, self.seq), body);
        self.seq += 1;
    }

    fn observe(&mut self, msg: &ProtocolMessage) {
        let price = match &msg.payload {
            Payload::Offer { order, .. } | Payload::PurchaseConfirm { order, .. } => Some(order.total_price),
            Payload::TokenRequest { amount, .. } | Payload::TempPaymentAck { amount, .. } => Some(*amount),
            _ => None,
        };
        if let Some(p) = price {
            self.seen_amounts.insert(msg.txn, p);
        }
    }

    /// Hands an outgoing message to the attacker, then to the queue.
    fn send(&mut self, msg: ProtocolMessage) {
        self.monitor.on_send(self.now, &msg);
        self.observe(&msg);
        let arrive = self.now + self.cfg.latency;
        let Some(action) = self.adversary.decide(&msg) else {
            self.push(
                arrive,
                EventBody::Deliver {
                    msg,
                    mutated: false,
                    tag: None,
                },
            );
            return;
        };
        let label = Some(action.label());
        match inject(&action, msg.clone(), self.seen_amounts.get(&msg.txn).copied()) {
            Injection::Deliver { msg, mutated } => self.push(arrive, EventBody::Deliver { msg, mutated, tag: label }),
            Injection::Delayed { msg, extra } => self.push(
                arrive + extra,
                EventBody::Deliver {
                    msg,
                    mutated: false,
                    tag: label,
                },
            ),
            Injection::Replayed { msg } => {
                self.push(
                    arrive,
                    EventBody::Deliver {
                        msg: msg.clone(),
                        mutated: false,
                        tag: None,
                    },
                );
                self.push(
                    arrive + REPLAY_LAG,
                    EventBody::Deliver {
                        msg,
                        mutated: false,
                        tag: label,
                    },
                );
            }
            Injection::Dropped => {
                self.monitor.on_drop(&msg);
                self.records.push(TraceRecord {
                    tick: self.now,
                    event: TraceEvent::Drop,
                    edge: edge(msg.from, msg.to),
                    kind: msg.kind().to_string(),
                    txn: Some(msg.txn),
                    mutated: false,
                    digest: msg.digest().to_hex(),
                    adversary: label,
                    error: None,
                    message: Some(msg),
                });
            }
        }
    }

    fn step(&mut self, at: EntityId, input: Input, mut record: TraceRecord) {
        let Some(entity) = self.entities.get_mut(&at) else {
            record.error = Some(format!("no entity {at}"));
            self.records.push(record);
            return;
        };
        let result = entity.step_mut(&input, self.now, &mut self.rng);
        match result {
            Ok(out) => {
                self.records.push(record);
                if let Input::Message(msg) = &input {
                    self.monitor.on_deliver(self.now, msg);
                }
                self.monitor.on_transition(self.now, &out);
                for t in &out.timers {
                    self.push(self.now + t.delay, EventBody::Timer { at, tag: t.tag });
                }
                for msg in out.messages {
                    self.send(msg);
                }
            }
            Err(e) => {
                record.error = Some(e.to_string());
                self.records.push(record);
                if let Input::Message(msg) = &input {
                    self.monitor.on_refused(self.now, msg);
                }
            }
        }
        self.monitor.check_funds(self.now, &self.entities);
    }

    fn run(mut self) -> Trace {
        let end = loop {
            let Some((&(at, seq), _)) = self.queue.first_key_value() else {
                break RunEnd::Quiescent { tick: self.now };
            };
            if at > self.cfg.tick_limit {
                break RunEnd::TickLimitExceeded {
                    tick: self.now,
                    pending: self.queue.len(),
                };
            }
            let body = self.queue.remove(&(at, seq)).expect("key just seen");
            self.now = at;
            match body {
                EventBody::Deliver { msg, mutated, tag } => {
                    let record = TraceRecord {
                        tick: at,
                        event: TraceEvent::Deliver,
                        edge: edge(msg.from, msg.to),
                        kind: msg.kind().to_string(),
                        txn: Some(msg.txn),
                        mutated,
                        digest: msg.digest().to_hex(),
                        adversary: tag,
                        error: None,
                        message: Some(msg.clone()),
                    };
                    self.step(msg.to, Input::Message(msg), record);
                }
                EventBody::Timer { at: who, tag } => {
                    let input = Input::Timer(tag);
                    let record = TraceRecord {
                        tick: at,
                        event: TraceEvent::Timer,
                        edge: edge(who, who),
                        kind: input.kind().to_string(),
                        txn: input.txn(),
                        mutated: false,
                        digest: crate::digest::Digest::of(&serde_json::to_vec(&tag).expect("tags serialize"))
                            .to_hex(),
                        adversary: None,
                        error: None,
                        message: None,
                    };
                    self.step(who, input, record);
                }
            }
        };
        let initial_funds = self.monitor.initial_funds();
        let violations = self.monitor.finish(self.now, &self.entities);
        Trace {
            records: self.records,
            entities: self.entities,
            end,
            violations,
            initial_funds,
        }
    }
}

/// Drives the world to quiescence or the tick limit. `seed` feeds the
/// entities' randomness; the attacker carries its own generator.
pub fn simulate(world: World, adversary: Adversary, cfg: SimConfig, seed: u64) -> Trace {
    let monitor = Monitor::new(&world.entities);
    let mut sim = Sim {
        entities: world.entities,
        queue: BTreeMap::new(),
        seq: 0,
        now: 0,
        cfg,
        rng: ChaCha20Rng::seed_from_u64(seed),
        adversary,
        seen_amounts: BTreeMap::new(),
        records: Vec::new(),
        monitor,
    };
    for (at, who, tag) in world.timers {
        sim.push(at, EventBody::Timer { at: who, tag });
    }
    sim.run()
}

/// Builds the scenario's world with `seed` and runs it.
pub fn run(scenario: &crate::scenario::ScenarioConfig, seed: u64) -> Result<Trace, crate::scenario::ScenarioError> {
    scenario.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let world = scenario.build_world(&mut rng);
    let adversary = Adversary::new(
        scenario.adversary.clone(),
        scenario.chaos.clone(),
        ChaCha20Rng::seed_from_u64(rng.next_u64()),
    );
    let cfg = SimConfig {
        latency: scenario.latency,
        tick_limit: scenario.tick_limit,
    };
    Ok(simulate(world, adversary, cfg, rng.next_u64()))
}
