//! Scenario files: who takes part, what they buy, how they judge the goods,
//! and what the network attacker does.
//!
//! ```toml
//! seed = 7
//! deadline = 100
//!
//! [[merchants]]
//! id = "M1"
//! catalog = { widget = 15000 }
//! history = { total = 1000, rejected = 25 }
//!
//! [[customers]]
//! id = "C1"
//! balance = 100000
//! min_grade = "B1"
//! rejection = { script = ["reject", "accept"] }
//! purchases = [{ merchant = "M1", product = "widget" }]
//!
//! [[adversary]]
//! action = { flip_bits = [1000] }
//! target = { kind = "PaymentRequest" }
//! ```
//!
//! The bank pair and the TTP are implicit (`CB1`, `MB1`, `TTP1`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use crate::entities::{
    Account, AcceptancePolicy, CustomerBankState, CustomerState, Directory, EntityState, MerchantBankState,
    MerchantState, PurchasePlan, RejectionBehavior, RoleState, Tick, TimerTag, TtpState,
};
use crate::ids::{AccountId, EntityId, ProductId, Role};
use crate::simnet::{AdversaryAction, Chaos, World, DEFAULT_LATENCY, DEFAULT_TICK_LIMIT};
use crate::token::{Amount, Authority, KeyMaterial};
use crate::trust::{Grade, TrustRecord, TrustTable};

pub const CB: EntityId = EntityId::customer_bank(1);
pub const MB: EntityId = EntityId::merchant_bank(1);
pub const TTP: EntityId = EntityId::ttp(1);

pub const DEFAULT_DEADLINE: Tick = 100;
pub const DEFAULT_RETRY_CAP: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn default_tick_limit() -> Tick {
    DEFAULT_TICK_LIMIT
}
fn default_deadline() -> Tick {
    DEFAULT_DEADLINE
}
fn default_latency() -> Tick {
    DEFAULT_LATENCY
}
fn default_retry_cap() -> u32 {
    DEFAULT_RETRY_CAP
}
fn one() -> u32 {
    1
}
fn never() -> RejectionBehavior {
    RejectionBehavior::Never
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick_limit")]
    pub tick_limit: Tick,
    /// Ticks the TTP waits for dispatch, verdict or replacement.
    #[serde(default = "default_deadline")]
    pub deadline: Tick,
    #[serde(default = "default_latency")]
    pub latency: Tick,
    /// Token regenerations allowed per transaction before it is aborted.
    #[serde(default = "default_retry_cap")]
    pub retry_cap: u32,
    #[serde(default)]
    pub merchants: Vec<MerchantConfig>,
    #[serde(default)]
    pub customers: Vec<CustomerConfig>,
    #[serde(default)]
    pub adversary: Vec<AdversaryAction>,
    #[serde(default)]
    pub chaos: Option<Chaos>,
    #[serde(default)]
    pub workload: Option<Workload>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MerchantConfig {
    pub id: EntityId,
    /// Unit prices.
    pub catalog: BTreeMap<ProductId, u64>,
    #[serde(default)]
    pub balance: u64,
    /// Trading history the TTP already holds for this merchant.
    #[serde(default)]
    pub history: Option<History>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct History {
    pub total: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomerConfig {
    pub id: EntityId,
    pub balance: u64,
    #[serde(default)]
    pub min_grade: Option<Grade>,
    #[serde(default = "never")]
    pub rejection: RejectionBehavior,
    #[serde(default)]
    pub purchases: Vec<PurchaseConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurchaseConfig {
    pub merchant: EntityId,
    pub product: ProductId,
    #[serde(default = "one")]
    pub quantity: u32,
    #[serde(default)]
    pub start: Tick,
}

/// Extra purchases drawn at random from the declared catalogs and dealt
/// round-robin to the customers, one start every `spacing` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub purchases: usize,
    #[serde(default = "one_tick")]
    pub spacing: Tick,
    #[serde(default = "three")]
    pub max_quantity: u32,
}

fn one_tick() -> Tick {
    1
}
fn three() -> u32 {
    3
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tick_limit: Option<Tick>,
    pub deadline: Option<Tick>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.tick_limit {
            self.tick_limit = t;
        }
        if let Some(d) = o.deadline {
            self.deadline = d;
        }
    }

    /// Every declared entity, banks and TTP included.
    pub fn entity_ids(&self) -> BTreeSet<EntityId> {
        let mut ids: BTreeSet<EntityId> = [CB, MB, TTP].into_iter().collect();
        ids.extend(self.merchants.iter().map(|m| m.id));
        ids.extend(self.customers.iter().map(|c| c.id));
        ids
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.latency == 0 {
            return Err(invalid("latency", "must be at least 1"));
        }
        if self.deadline == 0 {
            return Err(invalid("deadline", "must be at least 1"));
        }
        let mut seen = BTreeSet::new();
        let mut catalogs: BTreeMap<EntityId, &BTreeMap<ProductId, u64>> = BTreeMap::new();
        for (i, m) in self.merchants.iter().enumerate() {
            let f = format!("merchants[{i}]");
            if m.id.role != Role::Merchant {
                return Err(invalid(format!("{f}.id"), format!("{} is not a merchant id", m.id)));
            }
            if !seen.insert(m.id) {
                return Err(invalid(format!("{f}.id"), format!("{} declared twice", m.id)));
            }
            if m.catalog.is_empty() {
                return Err(invalid(format!("{f}.catalog"), "empty"));
            }
            if let Some((p, _)) = m.catalog.iter().find(|(_, price)| **price == 0) {
                return Err(invalid(format!("{f}.catalog.{p}"), "price must be positive"));
            }
            if let Some(h) = m.history {
                if h.rejected > h.total {
                    return Err(invalid(format!("{f}.history.rejected"), "exceeds total"));
                }
            }
            catalogs.insert(m.id, &m.catalog);
        }
        for (i, c) in self.customers.iter().enumerate() {
            let f = format!("customers[{i}]");
            if c.id.role != Role::Customer {
                return Err(invalid(format!("{f}.id"), format!("{} is not a customer id", c.id)));
            }
            if !seen.insert(c.id) {
                return Err(invalid(format!("{f}.id"), format!("{} declared twice", c.id)));
            }
            if let RejectionBehavior::Probability(p) = c.rejection {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("{f}.rejection.probability"), format!("{p} is not in [0, 1]")));
                }
            }
            for (j, p) in c.purchases.iter().enumerate() {
                let pf = format!("{f}.purchases[{j}]");
                let Some(catalog) = catalogs.get(&p.merchant) else {
                    return Err(invalid(format!("{pf}.merchant"), format!("{} is not declared", p.merchant)));
                };
                if !catalog.contains_key(&p.product) {
                    return Err(invalid(
                        format!("{pf}.product"),
                        format!("{} does not sell {}", p.merchant, p.product),
                    ));
                }
                if p.quantity == 0 {
                    return Err(invalid(format!("{pf}.quantity"), "must be at least 1"));
                }
            }
        }
        let ids = self.entity_ids();
        for (i, a) in self.adversary.iter().enumerate() {
            let f = format!("adversary[{i}]");
            for (name, id) in [("from", a.target.from), ("to", a.target.to)] {
                if let Some(id) = id {
                    if !ids.contains(&id) {
                        return Err(invalid(format!("{f}.target.{name}"), format!("{id} is not declared")));
                    }
                }
            }
            if let Some(txn) = a.target.txn {
                if !ids.contains(&txn.originator) {
                    return Err(invalid(format!("{f}.target.txn"), format!("{} is not declared", txn.originator)));
                }
            }
            if let Some(k) = a.target.kind {
                if a.action.needs_token() && !k.carries_token() {
                    return Err(invalid(format!("{f}.action"), format!("{k} carries no token")));
                }
            }
            if a.nth == 0 {
                return Err(invalid(format!("{f}.nth"), "counts from 1"));
            }
        }
        if let Some(ch) = &self.chaos {
            for (name, p) in [("tamper", ch.tamper), ("drop", ch.drop), ("delay", ch.delay)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("chaos.{name}"), format!("{p} is not in [0, 1]")));
                }
            }
        }
        if let Some(w) = &self.workload {
            if w.purchases > 0 && (self.customers.is_empty() || self.merchants.is_empty()) {
                return Err(invalid("workload", "needs at least one customer and one merchant"));
            }
            if w.max_quantity == 0 {
                return Err(invalid("workload.max_quantity", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Each customer's purchase plans, workload included.
    fn plans(&self, rng: &mut ChaCha20Rng) -> BTreeMap<EntityId, Vec<PurchasePlan>> {
        let mut plans: BTreeMap<EntityId, Vec<PurchasePlan>> = self
            .customers
            .iter()
            .map(|c| {
                let own = c
                    .purchases
                    .iter()
                    .map(|p| PurchasePlan {
                        merchant: p.merchant,
                        product: p.product.clone(),
                        quantity: p.quantity,
                        start: p.start,
                    })
                    .collect();
                (c.id, own)
            })
            .collect();
        if let Some(w) = self.workload {
            for n in 0..w.purchases {
                let customer = self.customers[n % self.customers.len()].id;
                let m = &self.merchants[rng.gen_range(0..self.merchants.len())];
                let products: Vec<&ProductId> = m.catalog.keys().collect();
                let product = products[rng.gen_range(0..products.len())].clone();
                plans.get_mut(&customer).expect("declared").push(PurchasePlan {
                    merchant: m.id,
                    product,
                    quantity: rng.gen_range(1..=w.max_quantity),
                    start: n as Tick * w.spacing,
                });
            }
        }
        plans
    }

    /// Keys, certificates and initial state for every participant. Assumes
    /// the config is valid.
    pub fn build_world(&self, rng: &mut ChaCha20Rng) -> World {
        let root = Authority::generate(rng);
        let mut dir = Directory::new(root.root_key());
        let mut keyed = BTreeMap::new();
        for id in self.entity_ids() {
            let keys = KeyMaterial::generate(rng, id == CB);
            let cert = root.issue(id, keys.public_key());
            dir.insert(cert.clone());
            keyed.insert(id, (keys, cert));
        }
        let dir = Arc::new(dir);
        let plans = self.plans(rng);

        let mut roles: BTreeMap<EntityId, RoleState> = BTreeMap::new();
        let mut timers = Vec::new();
        let mut accounts = BTreeMap::new();
        for c in &self.customers {
            let plan = plans[&c.id].clone();
            for (i, p) in plan.iter().enumerate() {
                timers.push((p.start, c.id, TimerTag::StartPurchase { purchase: i }));
            }
            let account = AccountId(c.id.index as u64);
            accounts.insert(
                account,
                Account {
                    owner: c.id,
                    available: Amount(c.balance),
                    held: Amount::ZERO,
                },
            );
            roles.insert(
                c.id,
                RoleState::Customer(CustomerState::new(
                    account,
                    CB,
                    TTP,
                    AcceptancePolicy { min_grade: c.min_grade },
                    c.rejection.clone(),
                    plan,
                )),
            );
        }
        let mut trust = TrustTable::new();
        let mut merchant_accounts = BTreeMap::new();
        for m in &self.merchants {
            let catalog = m.catalog.iter().map(|(p, v)| (p.clone(), Amount(*v))).collect();
            roles.insert(m.id, RoleState::Merchant(MerchantState::new(catalog, TTP, MB)));
            merchant_accounts.insert(m.id, Amount(m.balance));
            if let Some(h) = m.history {
                trust.insert(TrustRecord::with_history(m.id, h.total, h.rejected));
            }
        }
        roles.insert(CB, RoleState::CustomerBank(CustomerBankState::new(accounts, TTP)));
        roles.insert(MB, RoleState::MerchantBank(MerchantBankState::new(merchant_accounts, CB, TTP)));
        roles.insert(TTP, RoleState::Ttp(TtpState::new(trust, self.deadline, self.retry_cap, CB, MB)));

        let entities = roles
            .into_iter()
            .map(|(id, role)| {
                let (keys, cert) = keyed.remove(&id).expect("every role is keyed");
                (id, EntityState::new(keys, cert, dir.clone(), role))
            })
            .collect();
        World { entities, timers }
    }
}
