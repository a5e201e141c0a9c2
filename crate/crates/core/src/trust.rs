//! Merchant trust values, trust factors and letter grades.
//!
//! The trust value is the percentage of a merchant's transactions that ended
//! in a customer rejection. Once any customer has rejected the same product
//! from the merchant more than once, the trust value is squared (and clamped
//! to 100) for as long as the record exists. The trust factor is
//! `100 - trust value`, bucketed into ten grades by decade.
//!
//! All arithmetic is on exact rationals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ids::{EntityId, ProductId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrustError {
    #[error("merchant has no transactions; trust value is undefined")]
    ZeroTransactions,
    #[error("percentage {0} outside [0, 100]")]
    OutOfRange(String),
    #[error("cannot parse percentage {0:?}")]
    Parse(String),
}

/// An exact percentage in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(Ratio<u128>);

impl Percent {
    pub fn new(numer: u128, denom: u128) -> Result<Percent, TrustError> {
        if denom == 0 {
            return Err(TrustError::OutOfRange(format!("{numer}/0")));
        }
        let value = Ratio::new(numer, denom);
        if value > Ratio::from_integer(100) {
            return Err(TrustError::OutOfRange(value.to_string()));
        }
        Ok(Percent(value))
    }

    pub fn whole(value: u128) -> Result<Percent, TrustError> {
        Percent::new(value, 1)
    }

    pub fn zero() -> Percent {
        Percent(Ratio::from_integer(0))
    }

    pub fn hundred() -> Percent {
        Percent(Ratio::from_integer(100))
    }

    pub fn numer(&self) -> u128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u128 {
        *self.0.denom()
    }

    /// Decimal rendering rounded half-up to `places` digits.
    pub fn to_fixed(&self, places: u32) -> String {
        let scale = 10u128.pow(places);
        let n = self.numer() * scale;
        let d = self.denom();
        let scaled = (2 * n + d) / (2 * d);
        if places == 0 {
            return scaled.to_string();
        }
        format!(
            "{}.{:0width$}",
            scaled / scale,
            scaled % scale,
            width = places as usize
        )
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_fixed(2))
    }
}

/// Parses decimal text such as `97.5` or a ratio such as `200/43`.
impl FromStr for Percent {
    type Err = TrustError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrustError::Parse(s.to_string());
        if let Some((n, d)) = s.split_once('/') {
            return Percent::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let denom = 10u128.checked_pow(frac.len() as u32).ok_or_else(bad)?;
        let digits = format!("{int}{frac}");
        Percent::new(digits.parse().map_err(|_| bad())?, denom)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{}/{}", self.numer(), self.denom()))
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Letter grades; the derived order puts `E2` lowest and `A1` highest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    E2,
    E1,
    D2,
    D1,
    C2,
    C1,
    B2,
    B1,
    A2,
    A1,
}

impl Grade {
    /// Highest first.
    pub const ALL: [Grade; 10] = [
        Grade::A1,
        Grade::A2,
        Grade::B1,
        Grade::B2,
        Grade::C1,
        Grade::C2,
        Grade::D1,
        Grade::D2,
        Grade::E1,
        Grade::E2,
    ];

    /// Inclusive lower bound of the grade's interval.
    pub fn floor(self) -> u32 {
        self as u32 * 10
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Grade {
    type Err = TrustError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Grade::ALL
            .into_iter()
            .find(|g| g.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| TrustError::Parse(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Accepted,
    Rejected,
}

/// Per-merchant counters kept by the trusted third party.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRecord {
    pub merchant: EntityId,
    pub total_transactions: u64,
    pub rejected_transactions: u64,
    #[serde(with = "repeat_entries")]
    pub repeat_rejections: BTreeMap<(EntityId, ProductId), u32>,
}

impl TrustRecord {
    pub fn new(merchant: EntityId) -> Self {
        TrustRecord {
            merchant,
            total_transactions: 0,
            rejected_transactions: 0,
            repeat_rejections: BTreeMap::new(),
        }
    }

    /// A record with pre-existing history and no repeat rejections.
    pub fn with_history(merchant: EntityId, total: u64, rejected: u64) -> Self {
        assert!(rejected <= total, "rejections exceed transactions");
        TrustRecord {
            total_transactions: total,
            rejected_transactions: rejected,
            ..TrustRecord::new(merchant)
        }
    }

    /// Whether some customer rejected the same product more than once.
    pub fn squaring_active(&self) -> bool {
        self.repeat_rejections.values().any(|&n| n > 1)
    }
}

/// Plain rejection percentage, before any repeat penalty.
pub fn base_trust_value(record: &TrustRecord) -> Result<Percent, TrustError> {
    if record.total_transactions == 0 {
        return Err(TrustError::ZeroTransactions);
    }
    Percent::new(
        record.rejected_transactions as u128 * 100,
        record.total_transactions as u128,
    )
}

pub fn trust_value(record: &TrustRecord) -> Result<Percent, TrustError> {
    let tv = base_trust_value(record)?;
    if !record.squaring_active() {
        return Ok(tv);
    }
    let squared = tv.0 * tv.0;
    if squared > Ratio::from_integer(100) {
        Ok(Percent::hundred())
    } else {
        Ok(Percent(squared))
    }
}

pub fn trust_factor(tv: Percent) -> Percent {
    Percent(Ratio::from_integer(100) - tv.0)
}

pub fn grade(tf: Percent) -> Grade {
    // tf <= 100, so the decade index is 0..=10; 100 joins the top interval
    let decade = (tf.numer() / (tf.denom() * 10)).min(9) as usize;
    Grade::ALL[9 - decade]
}

pub fn record_outcome(
    record: &TrustRecord,
    customer: EntityId,
    product: &ProductId,
    outcome: Outcome,
) -> TrustRecord {
    let mut next = record.clone();
    next.total_transactions += 1;
    if outcome == Outcome::Rejected {
        next.rejected_transactions += 1;
        *next
            .repeat_rejections
            .entry((customer, product.clone()))
            .or_insert(0) += 1;
    }
    next
}

/// What a customer sees when looking a merchant up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrustStanding {
    Rated { tv: Percent, tf: Percent, grade: Grade },
    Unrated,
}

impl TrustStanding {
    pub fn of(record: Option<&TrustRecord>) -> TrustStanding {
        match record.map(trust_value) {
            Some(Ok(tv)) => {
                let tf = trust_factor(tv);
                TrustStanding::Rated {
                    tv,
                    tf,
                    grade: grade(tf),
                }
            }
            _ => TrustStanding::Unrated,
        }
    }
}

/// The TTP's table of merchant records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustTable {
    records: BTreeMap<EntityId, TrustRecord>,
}

impl TrustTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: TrustRecord) {
        self.records.insert(record.merchant, record);
    }

    pub fn get(&self, merchant: &EntityId) -> Option<&TrustRecord> {
        self.records.get(merchant)
    }

    pub fn records(&self) -> impl Iterator<Item = &TrustRecord> {
        self.records.values()
    }

    pub fn lookup(&self, merchant: &EntityId) -> TrustStanding {
        TrustStanding::of(self.records.get(merchant))
    }

    /// Read-modify-write of one merchant's record.
    pub fn record(&mut self, merchant: EntityId, customer: EntityId, product: &ProductId, outcome: Outcome) {
        let current = self
            .records
            .remove(&merchant)
            .unwrap_or_else(|| TrustRecord::new(merchant));
        let next = record_outcome(&current, customer, product, outcome);
        self.records.insert(merchant, next);
    }

    /// Tab-separated export, one row per merchant ordered by id.
    pub fn export(&self) -> String {
        let mut out = String::from("merchant\ttotal\trejected\ttv\ttf\tgrade\n");
        for record in self.records.values() {
            let (tv, tf, grade) = match TrustStanding::of(Some(record)) {
                TrustStanding::Rated { tv, tf, grade } => {
                    (tv.to_fixed(2), tf.to_fixed(2), grade.to_string())
                }
                TrustStanding::Unrated => ("-".into(), "-".into(), "unrated".into()),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                record.merchant,
                record.total_transactions,
                record.rejected_transactions,
                tv,
                tf,
                grade
            ));
        }
        out
    }
}

mod repeat_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::ids::{EntityId, ProductId};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        customer: EntityId,
        product: ProductId,
        count: u32,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(EntityId, ProductId), u32>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|((customer, product), count)| Entry {
                customer: *customer,
                product: product.clone(),
                count: *count,
            })
            .collect::<Vec<_>>()
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<BTreeMap<(EntityId, ProductId), u32>, D::Error> {
        Ok(Vec::<Entry>::deserialize(deserializer)?
            .into_iter()
            .map(|e| ((e.customer, e.product), e.count))
            .collect())
    }
}
