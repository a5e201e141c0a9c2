//! The network attacker. It sees every byte in flight and may alter, copy,
//! hold back or discard messages, but it holds no entity keys: a sealed token
//! is opaque ciphertext to it.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::entities::{MessageKind, ProtocolMessage, Tick};
use crate::ids::{EntityId, TransactionId};
use crate::token::{Amount, AMOUNT_OFFSET};

/// How long after the original a replayed copy arrives.
pub const REPLAY_LAG: Tick = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Toggle these bit positions of the sealed envelope. Positions past the
    /// end wrap around.
    FlipBits(Vec<usize>),
    /// Rewrite the ciphertext over the amount field so that, were it not
    /// authenticated, it would decrypt to this value.
    ReplaceAmount(u64),
    /// Deliver the message and a verbatim copy [`REPLAY_LAG`] ticks later.
    ReplayToken,
    Drop,
    Delay(Tick),
}

impl ActionKind {
    /// Mutations and replays only make sense on messages carrying a token.
    pub fn needs_token(&self) -> bool {
        matches!(
            self,
            ActionKind::FlipBits(_) | ActionKind::ReplaceAmount(_) | ActionKind::ReplayToken
        )
    }

    pub fn label(&self) -> String {
        match self {
            ActionKind::FlipBits(bits) => format!("flip_bits{bits:?}"),
            ActionKind::ReplaceAmount(v) => format!("replace_amount:{v}"),
            ActionKind::ReplayToken => "replay_token".into(),
            ActionKind::Drop => "drop".into(),
            ActionKind::Delay(t) => format!("delay:{t}"),
        }
    }
}

/// Which in-flight messages an action applies to. Unset fields match
/// anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    #[serde(default)]
    pub kind: Option<MessageKind>,
    #[serde(default)]
    pub from: Option<EntityId>,
    #[serde(default)]
    pub to: Option<EntityId>,
    #[serde(default)]
    pub txn: Option<TransactionId>,
}

impl Target {
    pub fn matches(&self, msg: &ProtocolMessage) -> bool {
        self.kind.is_none_or(|k| k == msg.kind())
            && self.from.is_none_or(|f| f == msg.from)
            && self.to.is_none_or(|t| t == msg.to)
            && self.txn.is_none_or(|t| t == msg.txn)
    }
}

fn first() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryAction {
    pub action: ActionKind,
    #[serde(default)]
    pub target: Target,
    /// Fires on the nth matching message, counting from 1.
    #[serde(default = "first")]
    pub nth: u32,
    /// Keep firing on every later match too.
    #[serde(default)]
    pub repeat: bool,
}

impl AdversaryAction {
    pub fn once(action: ActionKind, target: Target) -> Self {
        AdversaryAction {
            action,
            target,
            nth: 1,
            repeat: false,
        }
    }

    pub fn applies_to(&self, msg: &ProtocolMessage) -> bool {
        self.target.matches(msg) && (!self.action.needs_token() || msg.kind().carries_token())
    }
}

/// Background noise for long randomized runs: each in-flight message is
/// independently tampered, dropped or delayed with these probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chaos {
    #[serde(default)]
    pub tamper: f64,
    #[serde(default)]
    pub drop: f64,
    #[serde(default)]
    pub delay: f64,
    #[serde(default = "default_max_delay")]
    pub max_delay: Tick,
    /// Kinds never dropped.
    #[serde(default = "default_protect")]
    pub protect: Vec<MessageKind>,
}

fn default_max_delay() -> Tick {
    5
}

fn default_protect() -> Vec<MessageKind> {
    vec![MessageKind::Settlement]
}

impl Default for Chaos {
    fn default() -> Self {
        Chaos {
            tamper: 0.0,
            drop: 0.0,
            delay: 0.0,
            max_delay: default_max_delay(),
            protect: default_protect(),
        }
    }
}

impl Chaos {
    /// Rolls for one message. Tampering is tried first, then drop, then
    /// delay; at most one applies.
    pub fn pick(&self, msg: &ProtocolMessage, rng: &mut ChaCha20Rng) -> Option<ActionKind> {
        if msg.kind().carries_token() && rng.gen_bool(self.tamper) {
            return Some(random_mutation(msg, rng));
        }
        if !self.protect.contains(&msg.kind()) && rng.gen_bool(self.drop) {
            return Some(ActionKind::Drop);
        }
        if rng.gen_bool(self.delay) {
            return Some(ActionKind::Delay(rng.gen_range(1..=self.max_delay.max(1))));
        }
        None
    }
}

/// A single-bit flip anywhere in the envelope or a rewrite of the amount
/// field, chosen evenly.
pub fn random_mutation(msg: &ProtocolMessage, rng: &mut ChaCha20Rng) -> ActionKind {
    let bits = msg.payload.sealed_token().map_or(1, |s| s.envelope.len() * 8).max(1);
    if rng.gen_bool(0.5) {
        ActionKind::FlipBits(vec![rng.gen_range(0..bits)])
    } else {
        ActionKind::ReplaceAmount(rng.gen_range(1..=1_000_000))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Injection {
    /// Delivered after the normal latency; `mutated` if bytes changed.
    Deliver { msg: ProtocolMessage, mutated: bool },
    Dropped,
    Delayed { msg: ProtocolMessage, extra: Tick },
    /// The original plus a verbatim copy.
    Replayed { msg: ProtocolMessage },
}

/// Applies one action to an in-flight message. `seen_amount` is a cleartext
/// price the attacker observed for this transaction, which lets it aim an
/// amount rewrite; without one it overwrites blindly.
pub fn inject(action: &ActionKind, mut msg: ProtocolMessage, seen_amount: Option<Amount>) -> Injection {
    match action {
        ActionKind::Drop => Injection::Dropped,
        ActionKind::Delay(extra) => Injection::Delayed { msg, extra: *extra },
        ActionKind::ReplayToken => Injection::Replayed { msg },
        ActionKind::FlipBits(bits) => {
            let Some(sealed) = msg.payload.sealed_token_mut() else {
                return Injection::Deliver { msg, mutated: false };
            };
            let before = sealed.envelope.clone();
            let len = sealed.envelope.len() * 8;
            if len > 0 {
                for &bit in bits {
                    let bit = bit % len;
                    sealed.envelope[bit / 8] ^= 1 << (bit % 8);
                }
            }
            let mutated = sealed.envelope != before;
            Injection::Deliver { msg, mutated }
        }
        ActionKind::ReplaceAmount(value) => {
            let Some(sealed) = msg.payload.sealed_token_mut() else {
                return Injection::Deliver { msg, mutated: false };
            };
            let before = sealed.envelope.clone();
            if let Some(field) = sealed.envelope.get_mut(AMOUNT_OFFSET..AMOUNT_OFFSET + 8) {
                let target = value.to_be_bytes();
                match seen_amount {
                    // keystream xor old plaintext xor new plaintext
                    Some(old) => {
                        let old = old.0.to_be_bytes();
                        for i in 0..8 {
                            field[i] ^= old[i] ^ target[i];
                        }
                    }
                    None => field.copy_from_slice(&target),
                }
            }
            let mutated = sealed.envelope != before;
            Injection::Deliver { msg, mutated }
        }
    }
}

/// Scripted actions plus optional chaos, with per-action match counters.
#[derive(Debug, Clone)]
pub struct Adversary {
    pub actions: Vec<AdversaryAction>,
    pub chaos: Option<Chaos>,
    matched: Vec<u32>,
    rng: ChaCha20Rng,
}

impl Adversary {
    pub fn new(actions: Vec<AdversaryAction>, chaos: Option<Chaos>, rng: ChaCha20Rng) -> Self {
        let matched = vec![0; actions.len()];
        Adversary {
            actions,
            chaos,
            matched,
            rng,
        }
    }

    pub fn passive(rng: ChaCha20Rng) -> Self {
        Adversary::new(Vec::new(), None, rng)
    }

    /// The action to apply to `msg`, if any. The first scripted action that
    /// fires wins; otherwise chaos rolls.
    pub fn decide(&mut self, msg: &ProtocolMessage) -> Option<ActionKind> {
        let mut chosen = None;
        for (i, a) in self.actions.iter().enumerate() {
            if !a.applies_to(msg) {
                continue;
            }
            self.matched[i] += 1;
            let n = self.matched[i];
            if chosen.is_none() && (n == a.nth || (a.repeat && n > a.nth)) {
                chosen = Some(a.action.clone());
            }
        }
        if chosen.is_some() {
            return chosen;
        }
        let chaos = self.chaos.as_ref()?;
        chaos.pick(msg, &mut self.rng)
    }
}
