//! A five-party world and a FIFO message pump for entity unit tests.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::ids::{AccountId, ProductId};
use crate::token::{Amount, Authority};
use crate::trust::TrustTable;

pub const C1: EntityId = EntityId::customer(1);
pub const M1: EntityId = EntityId::merchant(1);
pub const CB: EntityId = EntityId::customer_bank(1);
pub const MB: EntityId = EntityId::merchant_bank(1);
pub const TTP: EntityId = EntityId::ttp(1);
pub const PRICE: Amount = Amount(15_000);
pub const BALANCE: Amount = Amount(100_000);

pub struct World {
    pub entities: BTreeMap<EntityId, EntityState>,
    pub rng: ChaCha20Rng,
    pub now: Tick,
    pub timers: Vec<(Tick, EntityId, TimerTag)>,
    pub delivered: Vec<ProtocolMessage>,
    pub errors: Vec<(ProtocolMessage, StepError)>,
}

pub struct Options {
    pub behavior: RejectionBehavior,
    pub policy: AcceptancePolicy,
    pub balance: Amount,
    pub trust: TrustTable,
    pub retry_cap: u32,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            behavior: RejectionBehavior::Never,
            policy: AcceptancePolicy::default(),
            balance: BALANCE,
            trust: TrustTable::new(),
            retry_cap: 3,
        }
    }
}

pub fn world() -> World {
    world_with(Options::default())
}

pub fn world_with(opts: Options) -> World {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let root = Authority::generate(&mut rng);
    let ids = [C1, M1, CB, MB, TTP];
    let keys: Vec<_> = ids
        .iter()
        .map(|id| KeyMaterial::generate(&mut rng, *id == CB))
        .collect();
    let mut dir = Directory::new(root.root_key());
    let certs: Vec<_> = ids
        .iter()
        .zip(&keys)
        .map(|(id, k)| root.issue(*id, k.public_key()))
        .collect();
    for c in &certs {
        dir.insert(c.clone());
    }
    let dir = Arc::new(dir);
    let roles = [
        RoleState::Customer(CustomerState::new(
            AccountId(1),
            CB,
            TTP,
            opts.policy,
            opts.behavior,
            vec![PurchasePlan {
                merchant: M1,
                product: ProductId::new("widget"),
                quantity: 1,
                start: 0,
            }],
        )),
        RoleState::Merchant(MerchantState::new(
            [(ProductId::new("widget"), PRICE)].into_iter().collect(),
            TTP,
            MB,
        )),
        RoleState::CustomerBank(CustomerBankState::new(
            [(
                AccountId(1),
                Account {
                    owner: C1,
                    available: opts.balance,
                    held: Amount::ZERO,
                },
            )]
            .into_iter()
            .collect(),
            TTP,
        )),
        RoleState::MerchantBank(MerchantBankState::new([(M1, Amount::ZERO)].into_iter().collect(), CB, TTP)),
        RoleState::Ttp(TtpState::new(opts.trust, 100, opts.retry_cap, CB, MB)),
    ];
    let entities = ids
        .iter()
        .zip(keys)
        .zip(certs)
        .zip(roles)
        .map(|(((id, k), c), r)| (*id, EntityState::new(k, c, dir.clone(), r)))
        .collect();
    World {
        entities,
        rng,
        now: 0,
        timers: Vec::new(),
        delivered: Vec::new(),
        errors: Vec::new(),
    }
}

impl World {
    pub fn get(&self, id: EntityId) -> &EntityState {
        &self.entities[&id]
    }

    pub fn ttp(&self) -> &TtpState {
        self.get(TTP).as_ttp().unwrap()
    }

    pub fn cb(&self) -> &CustomerBankState {
        self.get(CB).as_customer_bank().unwrap()
    }

    pub fn input(&mut self, at: EntityId, input: &Input) -> Result<Outputs, StepError> {
        let now = self.now;
        let out = self.entities.get_mut(&at).unwrap().step_mut(input, now, &mut self.rng)?;
        for t in &out.timers {
            self.timers.push((now + t.delay, at, t.tag));
        }
        Ok(out)
    }

    pub fn start(&mut self) -> Vec<ProtocolMessage> {
        let out = self
            .input(C1, &Input::Timer(TimerTag::StartPurchase { purchase: 0 }))
            .unwrap();
        out.messages
    }

    /// Delivers messages one tick apart in FIFO order until none remain.
    /// `edit` may alter a message in flight or return false to drop it.
    pub fn pump(
        &mut self,
        initial: Vec<ProtocolMessage>,
        mut edit: impl FnMut(&mut ProtocolMessage) -> bool,
    ) {
        let mut queue: VecDeque<_> = initial.into();
        while let Some(mut msg) = queue.pop_front() {
            self.now += 1;
            if !edit(&mut msg) {
                continue;
            }
            self.delivered.push(msg.clone());
            match self.input(msg.to, &Input::Message(msg.clone())) {
                Ok(out) => queue.extend(out.messages),
                Err(e) => self.errors.push((msg, e)),
            }
        }
    }

    /// Fires the earliest pending timer and pumps what it produces.
    pub fn fire_next_timer(&mut self) -> bool {
        if self.timers.is_empty() {
            return false;
        }
        let idx = (0..self.timers.len())
            .min_by_key(|&i| self.timers[i].0)
            .unwrap();
        let (at, who, tag) = self.timers.remove(idx);
        self.now = self.now.max(at);
        match self.input(who, &Input::Timer(tag)) {
            Ok(out) => self.pump(out.messages, |_| true),
            Err(e) => panic!("timer refused: {e}"),
        }
        true
    }

    pub fn run_happy(&mut self) {
        let first = self.start();
        self.pump(first, |_| true);
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.delivered.iter().filter(|m| m.kind() == kind).count()
    }

    pub fn txn(&self) -> TransactionId {
        TransactionId::new(C1, 1)
    }

    /// A message from `from` signed with its real key.
    pub fn signed(&self, from: EntityId, to: EntityId, txn: TransactionId, payload: Payload) -> ProtocolMessage {
        ProtocolMessage::signed(from, to, txn, payload, &self.get(from).keys)
    }
}
